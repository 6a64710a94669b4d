use std::rc::Rc;

use super::kernels::{self, axis_split, binary_map, gemm, reduce_to_shape};
use super::tape::Node;
use super::{Result, RngState, Tape, Tensor, TensorError, Var};

/// Padding of a temporal convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Centered window; the kernel width must be odd.
    Same,
    /// Window ends at the current step, so outputs never see the future.
    Causal,
}

impl PadMode {
    fn left(self, kernel: usize) -> usize {
        match self {
            PadMode::Same => (kernel - 1) / 2,
            PadMode::Causal => kernel - 1,
        }
    }
}

pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    Embedding { table: usize, ids: Rc<[usize]> },
    Conv1d { x: usize, w: usize, b: usize, mode: PadMode },
    Glu(usize),
    Dropout { x: usize, mask: Vec<f64> },
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Permute { x: usize, axes: Vec<usize> },
    Reshape(usize),
    Sum(usize),
    SumAxis { x: usize, axis: usize },
    GatherLast { x: usize, ids: Vec<usize> },
    IndexSelect { x: usize, rows: Vec<usize> },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Relu(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Glu(x)
            | Op::Reshape(x)
            | Op::Sum(x) => vec![*x],
            Op::Dropout { x, .. }
            | Op::Slice { x, .. }
            | Op::Permute { x, .. }
            | Op::SumAxis { x, .. }
            | Op::GatherLast { x, .. }
            | Op::IndexSelect { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::Conv1d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Concat { inputs, .. } => inputs.clone(),
        }
    }

    /// Emits the vector-Jacobian product of node `me` for each input.
    pub(crate) fn backward(&self, nodes: &[Node], me: usize, g: &[f64], emit: &mut dyn FnMut(usize, Vec<f64>)) {
        let val = |i: usize| -> &Tensor { &nodes[i].value };
        let out = val(me);
        match self {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                emit(*a, reduce_to_shape(g, out.shape(), val(*a).shape()));
                let mut gb = reduce_to_shape(g, out.shape(), val(*b).shape());
                if let Op::Sub(..) = self {
                    gb.iter_mut().for_each(|v| *v = -*v);
                }
                emit(*b, gb);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let prod = |other: &Tensor| binary_map(g, out.shape(), other.data(), other.shape(), out.shape(), |x, y| x * y);
                emit(*a, reduce_to_shape(&prod(tb), out.shape(), ta.shape()));
                emit(*b, reduce_to_shape(&prod(ta), out.shape(), tb.shape()));
            }
            Op::Scale(x, c) => emit(*x, g.iter().map(|v| v * c).collect()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (ga, gb) = matmul_backward(ta, tb, g);
                emit(*a, ga);
                emit(*b, gb);
            }
            Op::Sigmoid(x) => emit(*x, g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect()),
            Op::Tanh(x) => emit(*x, g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect()),
            Op::Relu(x) => emit(
                *x,
                g.iter()
                    .zip(val(*x).data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Softmax(x) => {
                let d = *out.shape().last().unwrap_or(&1);
                let mut gx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks_exact(d).zip(out.data().chunks_exact(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    gx.extend(gr.iter().zip(yr).map(|(gv, y)| y * (gv - dot)));
                }
                emit(*x, gx);
            }
            Op::LogSoftmax(x) => {
                let d = *out.shape().last().unwrap_or(&1);
                let mut gx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks_exact(d).zip(out.data().chunks_exact(d)) {
                    let total: f64 = gr.iter().sum();
                    gx.extend(gr.iter().zip(yr).map(|(gv, y)| gv - y.exp() * total));
                }
                emit(*x, gx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let tx = val(*x);
                let gam = val(*gamma).data();
                let d = gam.len();
                let mut gx = Vec::with_capacity(g.len());
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for (xr, gr) in tx.data().chunks_exact(d).zip(g.chunks_exact(d)) {
                    let (mean, rstd) = moments(xr, *eps);
                    for j in 0..d {
                        xhat[j] = (xr[j] - mean) * rstd;
                        dxhat[j] = gr[j] * gam[j];
                        ggamma[j] += gr[j] * xhat[j];
                        gbeta[j] += gr[j];
                    }
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dx: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let n = d as f64;
                    gx.extend((0..d).map(|j| rstd / n * (n * dxhat[j] - sum_d - xhat[j] * sum_dx)));
                }
                emit(*x, gx);
                emit(*gamma, ggamma);
                emit(*beta, gbeta);
            }
            Op::Embedding { table, ids } => {
                let tt = val(*table);
                let d = tt.shape()[1];
                let mut gt = vec![0.0; tt.numel()];
                for (row, &id) in g.chunks_exact(d).zip(ids.iter()) {
                    for (a, v) in gt[id * d..(id + 1) * d].iter_mut().zip(row) {
                        *a += v;
                    }
                }
                emit(*table, gt);
            }
            Op::Conv1d { x, w, b, mode } => {
                let (tx, tw) = (val(*x), val(*w));
                let (bsz, t, c) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (k, o) = (tw.shape()[0], tw.shape()[2]);
                let cols = im2col(tx.data(), bsz, t, c, k, mode.left(k));
                let rows = bsz * t;
                let mut gw = vec![0.0; k * c * o];
                gemm(k * c, rows, o, &cols, true, g, false, &mut gw, false);
                let mut gb = vec![0.0; o];
                for row in g.chunks_exact(o) {
                    for (a, v) in gb.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                let mut gcols = vec![0.0; rows * k * c];
                gemm(rows, o, k * c, g, false, tw.data(), true, &mut gcols, false);
                emit(*x, col2im(&gcols, bsz, t, c, k, mode.left(k)));
                emit(*w, gw);
                emit(*b, gb);
            }
            Op::Glu(x) => {
                let tx = val(*x);
                let half = tx.shape().last().unwrap() / 2;
                let mut gx = Vec::with_capacity(tx.numel());
                for (xr, gr) in tx.data().chunks_exact(2 * half).zip(g.chunks_exact(half)) {
                    let (a, bb) = xr.split_at(half);
                    let start = gx.len();
                    gx.extend(gr.iter().zip(bb).map(|(gv, &z)| gv * sigmoid(z)));
                    for j in 0..half {
                        let s = sigmoid(bb[j]);
                        gx.push(gr[j] * a[j] * s * (1.0 - s));
                    }
                    debug_assert_eq!(gx.len() - start, 2 * half);
                }
                emit(*x, gx);
            }
            Op::Dropout { x, mask } => emit(*x, g.iter().zip(mask).map(|(a, m)| a * m).collect()),
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for &input in inputs {
                    let extent = val(input).shape()[*axis];
                    let mut gi = Vec::with_capacity(outer * extent * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gi.extend_from_slice(&g[base..base + extent * inner]);
                    }
                    emit(input, gi);
                    offset += extent;
                }
            }
            Op::Slice { x, axis, start } => {
                let tx = val(*x);
                let (outer, full, inner) = axis_split(tx.shape(), *axis);
                let len = out.shape()[*axis];
                let mut gx = vec![0.0; tx.numel()];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                emit(*x, gx);
            }
            Op::Permute { x, axes } => {
                let (gx, _) = kernels::permute(g, out.shape(), &kernels::inverse_permutation(axes));
                emit(*x, gx);
            }
            Op::Reshape(x) => emit(*x, g.to_vec()),
            Op::Sum(x) => emit(*x, vec![g[0]; val(*x).numel()]),
            Op::SumAxis { x, axis } => {
                let tx = val(*x);
                let (outer, extent, inner) = axis_split(tx.shape(), *axis);
                let mut gx = Vec::with_capacity(tx.numel());
                for o in 0..outer {
                    let row = &g[o * inner..(o + 1) * inner];
                    for _ in 0..extent {
                        gx.extend_from_slice(row);
                    }
                }
                emit(*x, gx);
            }
            Op::GatherLast { x, ids } => {
                let tx = val(*x);
                let v = *tx.shape().last().unwrap();
                let mut gx = vec![0.0; tx.numel()];
                for (r, (&id, gv)) in ids.iter().zip(g).enumerate() {
                    gx[r * v + id] += gv;
                }
                emit(*x, gx);
            }
            Op::IndexSelect { x, rows } => {
                let tx = val(*x);
                let inner = tx.numel() / tx.shape()[0];
                let mut gx = vec![0.0; tx.numel()];
                for (r, &src) in rows.iter().enumerate() {
                    for (a, v) in gx[src * inner..(src + 1) * inner].iter_mut().zip(&g[r * inner..(r + 1) * inner]) {
                        *a += v;
                    }
                }
                emit(*x, gx);
            }
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn im2col(x: &[f64], bsz: usize, t: usize, c: usize, k: usize, left: usize) -> Vec<f64> {
    let mut cols = vec![0.0; bsz * t * k * c];
    for b in 0..bsz {
        for step in 0..t {
            let row = (b * t + step) * k * c;
            for kk in 0..k {
                let src = step as isize + kk as isize - left as isize;
                if src < 0 || src as usize >= t {
                    continue;
                }
                let from = (b * t + src as usize) * c;
                cols[row + kk * c..row + (kk + 1) * c].copy_from_slice(&x[from..from + c]);
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], bsz: usize, t: usize, c: usize, k: usize, left: usize) -> Vec<f64> {
    let mut x = vec![0.0; bsz * t * c];
    for b in 0..bsz {
        for step in 0..t {
            let row = (b * t + step) * k * c;
            for kk in 0..k {
                let src = step as isize + kk as isize - left as isize;
                if src < 0 || src as usize >= t {
                    continue;
                }
                let to = (b * t + src as usize) * c;
                for (a, v) in x[to..to + c].iter_mut().zip(&cols[row + kk * c..row + (kk + 1) * c]) {
                    *a += v;
                }
            }
        }
    }
    x
}

enum MatMulKind {
    /// `b` is a plain matrix applied to every row of `a`.
    Shared { rows: usize, k: usize, n: usize },
    Batched { batch: usize, m: usize, k: usize, n: usize },
}

fn matmul_kind(a: &[usize], b: &[usize]) -> Result<(MatMulKind, Vec<usize>)> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "matmul",
        left: a.to_vec(),
        right: b.to_vec(),
    };
    if a.is_empty() || b.len() < 2 {
        return Err(mismatch());
    }
    let k = a[a.len() - 1];
    if b.len() == 2 {
        if b[0] != k {
            return Err(mismatch());
        }
        let mut shape = a.to_vec();
        *shape.last_mut().unwrap() = b[1];
        let rows = a.iter().product::<usize>() / k;
        return Ok((MatMulKind::Shared { rows, k, n: b[1] }, shape));
    }
    let r = a.len();
    if b.len() != r || a[..r - 2] != b[..r - 2] || b[r - 2] != k {
        return Err(mismatch());
    }
    let batch = a[..r - 2].iter().product();
    let (m, n) = (a[r - 2], b[r - 1]);
    let mut shape = a.to_vec();
    shape[r - 1] = n;
    Ok((MatMulKind::Batched { batch, m, k, n }, shape))
}

fn matmul_backward(a: &Tensor, b: &Tensor, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (kind, _) = matmul_kind(a.shape(), b.shape()).expect("validated in forward");
    let mut ga = vec![0.0; a.numel()];
    let mut gb = vec![0.0; b.numel()];
    match kind {
        MatMulKind::Shared { rows, k, n } => {
            gemm(rows, n, k, g, false, b.data(), true, &mut ga, false);
            gemm(k, rows, n, a.data(), true, g, false, &mut gb, false);
        }
        MatMulKind::Batched { batch, m, k, n } => {
            for p in 0..batch {
                let (ra, rb, rc) = (p * m * k..(p + 1) * m * k, p * k * n..(p + 1) * k * n, p * m * n..(p + 1) * m * n);
                gemm(m, n, k, &g[rc.clone()], false, &b.data()[rb.clone()], true, &mut ga[ra.clone()], false);
                gemm(k, m, n, &a.data()[ra], true, &g[rc], false, &mut gb[rb], false);
            }
        }
    }
    (ga, gb)
}

impl<'t> Var<'t> {
    fn same_tape(&self, other: &Var<'_>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn binary(self, other: Var<'t>, op: &'static str, f: impl Fn(f64, f64) -> f64, record: Op) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let shape = kernels::broadcast_shape(a.shape(), b.shape()).ok_or_else(|| TensorError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        })?;
        let data = binary_map(a.data(), a.shape(), b.data(), b.shape(), &shape, f);
        Ok(self.tape.push(Tensor::from_parts(shape, data), record))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value();
        let data = v.data().iter().map(|x| x * c).collect();
        self.tape.push(Tensor::from_parts(v.shape().to_vec(), data), Op::Scale(self.id, c))
    }

    /// Batched matrix product `[.., m, k] × [.., k, n]`; a 2-D right operand
    /// is shared across all leading dimensions of the left one.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (kind, shape) = matmul_kind(a.shape(), b.shape())?;
        let mut out = vec![0.0; shape.iter().product()];
        match kind {
            MatMulKind::Shared { rows, k, n } => gemm(rows, k, n, a.data(), false, b.data(), false, &mut out, false),
            MatMulKind::Batched { batch, m, k, n } => {
                for p in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &a.data()[p * m * k..(p + 1) * m * k],
                        false,
                        &b.data()[p * k * n..(p + 1) * k * n],
                        false,
                        &mut out[p * m * n..(p + 1) * m * n],
                        false,
                    );
                }
            }
        }
        Ok(self.tape.push(Tensor::from_parts(shape, out), Op::MatMul(self.id, other.id)))
    }

    fn unary(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let v = self.value();
        let data = v.data().iter().map(|&x| f(x)).collect();
        self.tape.push(Tensor::from_parts(v.shape().to_vec(), data), op)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, Op::Tanh(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), Op::Relu(self.id))
    }

    fn along_last(self, axis: usize, f: impl FnOnce(Var<'t>) -> Var<'t>) -> Result<Var<'t>> {
        let rank = self.value().rank();
        if axis >= rank {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        if axis + 1 == rank {
            return Ok(f(self));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(axis, rank - 1);
        let moved = self.permute(&axes)?;
        f(moved).permute(&axes)
    }

    /// Softmax along `axis`. Entries at −∞ get exactly zero weight; a row
    /// that is entirely −∞ yields zeros and registers a tape fault.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        self.along_last(axis, |x| x.softmax_last())
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        self.along_last(axis, |x| x.log_softmax_last())
    }

    fn softmax_last(self) -> Var<'t> {
        let v = self.value();
        let d = *v.shape().last().unwrap_or(&1);
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks_exact(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                self.tape.note_fault();
                out.extend(std::iter::repeat(0.0).take(d));
                continue;
            }
            let start = out.len();
            let mut total = 0.0;
            for &x in row {
                let e = (x - max).exp();
                total += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e /= total);
        }
        self.tape.push(Tensor::from_parts(v.shape().to_vec(), out), Op::Softmax(self.id))
    }

    fn log_softmax_last(self) -> Var<'t> {
        let v = self.value();
        let d = *v.shape().last().unwrap_or(&1);
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks_exact(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                self.tape.note_fault();
                out.extend(std::iter::repeat(0.0).take(d));
                continue;
            }
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|&x| x - lse));
        }
        self.tape.push(Tensor::from_parts(v.shape().to_vec(), out), Op::LogSoftmax(self.id))
    }

    /// Standardizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (x, g, b) = (self.value(), gamma.value(), beta.value());
        let d = *x.shape().last().unwrap_or(&1);
        if g.shape() != [d] || b.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: x.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks_exact(d) {
            let (mean, rstd) = moments(row, eps);
            out.extend((0..d).map(|j| (row[j] - mean) * rstd * g.data()[j] + b.data()[j]));
        }
        Ok(self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                eps,
            },
        ))
    }

    /// Row gather from a `[V, d]` table; the result has shape `ids_shape + [d]`.
    pub fn embedding(self, ids: &[usize], ids_shape: &[usize]) -> Result<Var<'t>> {
        let table = self.value();
        if table.rank() != 2 || ids_shape.iter().product::<usize>() != ids.len() {
            return Err(TensorError::Invalid {
                op: "embedding",
                msg: format!("table {:?} with {} ids of shape {ids_shape:?}", table.shape(), ids.len()),
            });
        }
        let (vocab, d) = (table.shape()[0], table.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange { index: id, extent: vocab });
            }
            out.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        Ok(self.tape.push(
            Tensor::from_parts(shape, out),
            Op::Embedding {
                table: self.id,
                ids: ids.into(),
            },
        ))
    }

    /// Temporal convolution of `[B, T, C]` with kernel `[K, C, O]` and bias `[O]`.
    pub fn conv1d(self, kernel: Var<'t>, bias: Var<'t>, mode: PadMode) -> Result<Var<'t>> {
        let (x, w, b) = (self.value(), kernel.value(), bias.value());
        let bad = || TensorError::ShapeMismatch {
            op: "conv1d",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        };
        if x.rank() != 3 || w.rank() != 3 || w.shape()[1] != x.shape()[2] || b.shape() != [w.shape()[2]] {
            return Err(bad());
        }
        let k = w.shape()[0];
        if mode == PadMode::Same && k % 2 == 0 {
            return Err(TensorError::Invalid {
                op: "conv1d",
                msg: format!("same padding needs an odd kernel width, got {k}"),
            });
        }
        let (bsz, t, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let o = w.shape()[2];
        let cols = im2col(x.data(), bsz, t, c, k, mode.left(k));
        let mut out = Vec::with_capacity(bsz * t * o);
        for _ in 0..bsz * t {
            out.extend_from_slice(b.data());
        }
        gemm(bsz * t, k * c, o, &cols, false, w.data(), false, &mut out, true);
        Ok(self.tape.push(
            Tensor::from_parts(vec![bsz, t, o], out),
            Op::Conv1d {
                x: self.id,
                w: kernel.id,
                b: bias.id,
                mode,
            },
        ))
    }

    /// Gated linear unit: first half of the last axis times the sigmoid of
    /// the second half.
    pub fn glu(self) -> Result<Var<'t>> {
        let x = self.value();
        let last = *x.shape().last().unwrap_or(&0);
        if last % 2 != 0 {
            return Err(TensorError::Invalid {
                op: "glu",
                msg: format!("last extent {last} is odd"),
            });
        }
        let half = last / 2;
        let mut out = Vec::with_capacity(x.numel() / 2);
        for row in x.data().chunks_exact(last) {
            let (a, b) = row.split_at(half);
            out.extend(a.iter().zip(b).map(|(&a, &b)| a * sigmoid(b)));
        }
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = half;
        Ok(self.tape.push(Tensor::from_parts(shape, out), Op::Glu(self.id)))
    }

    /// Inverted dropout. Identity when not training or when `p == 0`.
    pub fn dropout(self, p: f64, rng: &mut RngState, training: bool) -> Var<'t> {
        if !training || p <= 0.0 {
            return self;
        }
        let x = self.value();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..x.numel())
            .map(|_| if rng.uniform() < p { 0.0 } else { keep })
            .collect();
        let out = x.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        self.tape.push(Tensor::from_parts(x.shape().to_vec(), out), Op::Dropout { x: self.id, mask })
    }

    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() || start >= end || end > x.shape()[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("[{start}, {end}) on axis {axis} of {:?}", x.shape()),
            });
        }
        let (outer, full, inner) = axis_split(x.shape(), axis);
        let len = end - start;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        Ok(self.tape.push(Tensor::from_parts(shape, out), Op::Slice { x: self.id, axis, start }))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        if sorted != (0..x.rank()).collect::<Vec<_>>() {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{axes:?} is not a permutation of rank {}", x.rank()),
            });
        }
        let (data, shape) = kernels::permute(x.data(), x.shape(), axes);
        Ok(self.tape.push(
            Tensor::from_parts(shape, data),
            Op::Permute {
                x: self.id,
                axes: axes.to_vec(),
            },
        ))
    }

    /// Swaps two axes.
    pub fn transpose(self, a: usize, b: usize) -> Result<Var<'t>> {
        let mut axes: Vec<usize> = (0..self.value().rank()).collect();
        if a >= axes.len() || b >= axes.len() {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("axes ({a}, {b}) out of range"),
            });
        }
        axes.swap(a, b);
        self.permute(&axes)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let t = Tensor::new(shape, x.data().to_vec())?;
        Ok(self.tape.push(t, Op::Reshape(self.id)))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(self) -> Var<'t> {
        let total = self.value().data().iter().sum();
        self.tape.push(Tensor::scalar(total), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(TensorError::Invalid {
                op: "sum_axis",
                msg: format!("axis {axis} out of range for {:?}", x.shape()),
            });
        }
        let (outer, extent, inner) = axis_split(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let src = &x.data()[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                for (a, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *a += v;
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        Ok(self.tape.push(Tensor::from_parts(shape, out), Op::SumAxis { x: self.id, axis }))
    }

    /// Picks `x[..., ids[r]]` for every row `r` of the last axis.
    pub fn gather_last(self, ids: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let v = *x.shape().last().unwrap_or(&1);
        if x.rank() < 2 || ids.len() * v != x.numel() {
            return Err(TensorError::Invalid {
                op: "gather_last",
                msg: format!("{} ids for shape {:?}", ids.len(), x.shape()),
            });
        }
        let mut out = Vec::with_capacity(ids.len());
        for (row, &id) in x.data().chunks_exact(v).zip(ids) {
            if id >= v {
                return Err(TensorError::IndexOutOfRange { index: id, extent: v });
            }
            out.push(row[id]);
        }
        let shape = x.shape()[..x.rank() - 1].to_vec();
        Ok(self.tape.push(
            Tensor::from_parts(shape, out),
            Op::GatherLast {
                x: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Selects entries along the first axis (repeats allowed).
    pub fn index_select(self, rows: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() == 0 || rows.is_empty() {
            return Err(TensorError::Invalid {
                op: "index_select",
                msg: "needs a leading axis and at least one row".into(),
            });
        }
        let n = x.shape()[0];
        let inner = x.numel() / n;
        let mut out = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= n {
                return Err(TensorError::IndexOutOfRange { index: r, extent: n });
            }
            out.extend_from_slice(&x.data()[r * inner..(r + 1) * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = rows.len();
        Ok(self.tape.push(
            Tensor::from_parts(shape, out),
            Op::IndexSelect {
                x: self.id,
                rows: rows.to_vec(),
            },
        ))
    }
}

impl Tape {
    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for {base:?}"),
            });
        }
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: base.clone(),
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let extent = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * extent * inner..(o + 1) * extent * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let _ = first;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Central-difference check of d(sum(w * f(x)))/dx for every input.
    fn numeric_check<F>(inputs: &[Tensor], build: F)
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
    {
        let eval = |vals: &[Tensor]| -> f64 {
            let tape = Tape::inference();
            let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
            let out = build(&tape, &vars);
            weighted(&out.value())
        };
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&tape, &vars);
        let w = tape.constant(weights(&out.shape()));
        let loss = out.mul(w).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        let h = 1e-5;
        for (k, input) in inputs.iter().enumerate() {
            let zeros = Tensor::zeros(input.shape());
            let analytic = grads.wrt(vars[k]).unwrap_or(&zeros);
            for j in 0..input.numel() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[j] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[j];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "input {k} elem {j}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    fn weights(shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0)
    }

    fn weighted(t: &Tensor) -> f64 {
        t.data().iter().zip(weights(t.shape()).data()).map(|(a, b)| a * b).sum()
    }

    fn sample(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = RngState::new(seed);
        Tensor::from_fn(shape, |_| rng.uniform_range(-1.5, 1.5))
    }

    #[test]
    fn grad_broadcast_arithmetic() {
        let x = [sample(&[2, 3, 4], 1), sample(&[3, 1], 2)];
        numeric_check(&x, |_, v| v[0].add(v[1]).unwrap());
        numeric_check(&x, |_, v| v[0].sub(v[1]).unwrap());
        numeric_check(&x, |_, v| v[0].mul(v[1]).unwrap().scale(0.5));
        let y = [sample(&[2, 1, 4], 3), sample(&[1, 3, 1], 4)];
        numeric_check(&y, |_, v| v[0].mul(v[1]).unwrap());
    }

    #[test]
    fn grad_matmul() {
        numeric_check(&[sample(&[2, 3, 4], 5), sample(&[4, 5], 6)], |_, v| v[0].matmul(v[1]).unwrap());
        numeric_check(&[sample(&[2, 2, 3, 4], 7), sample(&[2, 2, 4, 2], 8)], |_, v| {
            v[0].matmul(v[1]).unwrap()
        });
    }

    #[test]
    fn grad_pointwise() {
        let x = [sample(&[3, 4], 9)];
        numeric_check(&x, |_, v| v[0].sigmoid());
        numeric_check(&x, |_, v| v[0].tanh());
        numeric_check(&x, |_, v| v[0].relu());
        numeric_check(&[sample(&[2, 6], 10)], |_, v| v[0].glu().unwrap());
    }

    #[test]
    fn grad_softmax_family() {
        let x = [sample(&[2, 3, 5], 11)];
        numeric_check(&x, |_, v| v[0].softmax(2).unwrap());
        numeric_check(&x, |_, v| v[0].softmax(1).unwrap());
        numeric_check(&x, |_, v| v[0].log_softmax(2).unwrap());
        numeric_check(&x, |_, v| v[0].log_softmax(0).unwrap());
    }

    #[test]
    fn grad_layer_norm() {
        let x = [sample(&[3, 5], 12), sample(&[5], 13), sample(&[5], 14)];
        numeric_check(&x, |_, v| v[0].layer_norm(v[1], v[2], 1e-5).unwrap());
    }

    #[test]
    fn grad_conv1d() {
        for mode in [PadMode::Same, PadMode::Causal] {
            let x = [sample(&[2, 5, 3], 15), sample(&[3, 3, 4], 16), sample(&[4], 17)];
            numeric_check(&x, |_, v| v[0].conv1d(v[1], v[2], mode).unwrap());
        }
    }

    #[test]
    fn grad_structural() {
        let x = [sample(&[2, 3, 4], 18), sample(&[2, 2, 4], 19)];
        numeric_check(&x, |t, v| t.concat(&[v[0], v[1]], 1).unwrap());
        numeric_check(&x, |_, v| v[0].slice(2, 1, 3).unwrap());
        numeric_check(&x, |_, v| v[0].permute(&[2, 0, 1]).unwrap());
        numeric_check(&x, |_, v| v[0].reshape(&[6, 4]).unwrap());
        numeric_check(&x, |_, v| v[0].sum_axis(1).unwrap());
        numeric_check(&x, |_, v| v[0].mean());
        numeric_check(&x, |_, v| v[0].gather_last(&[0, 3, 1, 2, 2, 0]).unwrap());
        numeric_check(&x, |_, v| v[1].index_select(&[1, 1, 0]).unwrap());
        numeric_check(&[sample(&[5, 3], 20)], |_, v| v[0].embedding(&[4, 0, 4, 2], &[2, 2]).unwrap());
    }

    #[test]
    fn shared_input_accumulates() {
        numeric_check(&[sample(&[3], 21)], |_, v| v[0].mul(v[0]).unwrap().add(v[0]).unwrap());
    }

    #[test]
    fn masked_softmax_gives_exact_zeros() {
        let tape = Tape::inference();
        let inf = f64::NEG_INFINITY;
        let x = tape.constant(Tensor::new(&[2, 3], vec![1.0, inf, 2.0, inf, inf, inf]).unwrap());
        let y = x.softmax(1).unwrap().value();
        assert_eq!(y.data()[1], 0.0);
        assert_eq!(&y.data()[3..], [0.0, 0.0, 0.0]);
        assert_eq!(tape.faults(), 1);
    }

    #[test]
    fn conv_causal_ignores_future() {
        let tape = Tape::inference();
        let w = tape.constant(sample(&[3, 2, 2], 22));
        let b = tape.constant(sample(&[2], 23));
        let x1 = sample(&[1, 4, 2], 24);
        let mut x2 = x1.clone();
        x2.data_mut()[6] += 5.0;
        let y1 = tape.constant(x1).conv1d(w, b, PadMode::Causal).unwrap().value();
        let y2 = tape.constant(x2).conv1d(w, b, PadMode::Causal).unwrap().value();
        assert_eq!(y1.data()[..6], y2.data()[..6]);
        assert_ne!(y1.data()[6..], y2.data()[6..]);
    }

    #[test]
    fn shape_errors() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(a.add(b).is_err());
        assert!(a.matmul(b).is_err());
        assert!(a.glu().is_err());
        assert!(a.slice(1, 2, 2).is_err());
        assert!(a.gather_last(&[0, 3]).is_err());
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn params_share_one_leaf() {
        let mut store = crate::autodiff::ParamStore::new();
        let p = store.add("w", Tensor::vector(&[1.0, 2.0]));
        let tape = Tape::new();
        let a = tape.param(&store, p);
        let b = tape.param(&store, p);
        assert_eq!(a.id(), b.id());
        let loss = a.mul(b).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        store.accumulate(&grads);
        assert_eq!(store.grad(p).unwrap().data(), [2.0, 4.0]);
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 12)) {
            let tape = Tape::inference();
            let x = tape.constant(Tensor::new(&[3, 4], vals).unwrap());
            let y = x.softmax(1).unwrap().value();
            for row in y.rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }

        #[test]
        fn dropout_keeps_expectation(p in 0.05f64..0.6, seed in 0u64..1000) {
            let tape = Tape::new();
            let x = tape.constant(Tensor::ones(&[4000]));
            let mut rng = RngState::new(seed);
            let y = x.dropout(p, &mut rng, true).value();
            let mean = y.data().iter().sum::<f64>() / 4000.0;
            prop_assert!((mean - 1.0).abs() < 0.12);
            let zeros = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / 4000.0;
            prop_assert!((zeros - p).abs() < 0.05);
            let same = x.dropout(p, &mut rng, false);
            prop_assert_eq!(same.id(), x.id());
        }
    }
}
