//! Raw buffer kernels shared by forward ops and their adjoints.

/// `c = a · b` (or `c += a · b`), with either operand optionally read
/// transposed. `a` is m×k and `b` is k×n after transposition.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
    // strides above address them in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

enum Layout {
    Same,
    /// Operand repeats every `len` output elements.
    Tile(usize),
    /// Each operand element covers `inner` consecutive output elements.
    Spread(usize),
    General(Vec<usize>),
}

fn strip_leading_ones(s: &[usize]) -> &[usize] {
    let start = s.iter().position(|&d| d != 1).unwrap_or(s.len());
    &s[start..]
}

fn layout(small: &[usize], out: &[usize]) -> Layout {
    if small == out {
        return Layout::Same;
    }
    let core = strip_leading_ones(small);
    if out.ends_with(core) {
        return Layout::Tile(core.iter().product());
    }
    let trailing = small.iter().rev().take_while(|&&d| d == 1).count();
    let head = &small[..small.len() - trailing];
    let pad = out.len() - small.len();
    let head_in_out = &out[pad..pad + head.len()];
    if pad == 0 && head == head_in_out {
        return Layout::Spread(out[head.len()..].iter().product());
    }
    Layout::General(offsets(small, out))
}

/// Flat operand offset for every output element.
fn offsets(small: &[usize], out: &[usize]) -> Vec<usize> {
    let pad = out.len() - small.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..small.len()).rev() {
        strides[i + pad] = if small[i] == 1 { 0 } else { acc };
        acc *= small[i];
    }
    let total: usize = out.iter().product();
    let mut result = Vec::with_capacity(total);
    let mut idx = vec![0; out.len()];
    let mut offset = 0;
    for _ in 0..total {
        result.push(offset);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out[d] {
                break;
            }
            offset -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    result
}

fn gather_index(layout: &Layout, i: usize) -> usize {
    match layout {
        Layout::Same => i,
        Layout::Tile(len) => i % len,
        Layout::Spread(inner) => i / inner,
        Layout::General(offs) => offs[i],
    }
}

/// Elementwise `f(a, b)` over the broadcast output shape.
pub(crate) fn binary_map(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let la = layout(a_shape, out_shape);
    let lb = layout(b_shape, out_shape);
    let total: usize = out_shape.iter().product();
    match (&la, &lb) {
        (Layout::Same, Layout::Same) => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        (Layout::Same, Layout::Tile(len)) => a
            .chunks_exact(*len)
            .flat_map(|chunk| chunk.iter().zip(b).map(|(&x, &y)| f(x, y)))
            .collect(),
        _ => (0..total)
            .map(|i| f(a[gather_index(&la, i)], b[gather_index(&lb, i)]))
            .collect(),
    }
}

/// Sums a gradient of `out_shape` down to a broadcast operand's shape.
pub(crate) fn reduce_to_shape(g: &[f64], out_shape: &[usize], shape: &[usize]) -> Vec<f64> {
    let n: usize = shape.iter().product();
    match layout(shape, out_shape) {
        Layout::Same => g.to_vec(),
        Layout::Tile(len) => {
            let mut acc = vec![0.0; n];
            for chunk in g.chunks_exact(len) {
                for (a, &v) in acc.iter_mut().zip(chunk) {
                    *a += v;
                }
            }
            acc
        }
        Layout::Spread(inner) => g.chunks_exact(inner).map(|c| c.iter().sum()).collect(),
        Layout::General(offs) => {
            let mut acc = vec![0.0; n];
            for (&o, &v) in offs.iter().zip(g) {
                acc[o] += v;
            }
            acc
        }
    }
}

/// Copies `data` of `shape` into the axis order given by `axes`.
pub(crate) fn permute(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if rank == 0 {
        out.extend_from_slice(data);
        return (out, out_shape);
    }
    // The innermost output axis is walked as a strided run.
    let last = rank - 1;
    let run = out_shape[last];
    let run_stride = strides[last];
    let mut idx = vec![0; rank];
    let mut offset = 0;
    for _ in 0..total / run {
        let mut o = offset;
        for _ in 0..run {
            out.push(data[o]);
            o += run_stride;
        }
        for d in (0..last).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Splits a shape around `axis` into (outer, extent, inner) element counts.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[1, 3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1], &[1, 4]), Some(vec![2, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
    }

    #[test]
    fn binary_map_layouts() {
        let a: Vec<f64> = (0..6).map(f64::from).collect();
        let row = [10.0, 20.0, 30.0];
        assert_eq!(
            binary_map(&a, &[2, 3], &row, &[1, 3], &[2, 3], |x, y| x + y),
            [10.0, 21.0, 32.0, 13.0, 24.0, 35.0]
        );
        let col = [100.0, 200.0];
        assert_eq!(
            binary_map(&a, &[2, 3], &col, &[2, 1], &[2, 3], |x, y| x + y),
            [100.0, 101.0, 102.0, 203.0, 204.0, 205.0]
        );
        let out = binary_map(&col, &[2, 1], &row, &[1, 3], &[2, 3], |x, y| x + y);
        assert_eq!(out, [110.0, 120.0, 130.0, 210.0, 220.0, 230.0]);
        assert_eq!(reduce_to_shape(&out, &[2, 3], &[2, 1]), [360.0, 660.0]);
        assert_eq!(reduce_to_shape(&out, &[2, 3], &[1, 3]), [320.0, 340.0, 360.0]);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn permute_round_trip() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let axes = [2, 0, 1];
        let (p, shape) = permute(&data, &[2, 3, 4], &axes);
        assert_eq!(shape, [4, 2, 3]);
        assert_eq!(p[1], 4.0);
        let (back, shape) = permute(&p, &shape, &inverse_permutation(&axes));
        assert_eq!(shape, [2, 3, 4]);
        assert_eq!(back, data);
    }
}
