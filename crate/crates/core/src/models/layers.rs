use crate::autodiff::{ParamId, ParamStore, RngState, Tensor, Var};

use super::{Ctx, ModelError};

/// Registers parameters in a fixed order, drawing initial values from one
/// seeded stream.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: RngState,
}

impl Init<'_> {
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| rng.uniform_range(-bound, bound));
        self.store.add(name, t)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| std * rng.normal());
        self.store.add(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, value))
    }
}

/// `x · w + b` over the last axis.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn normal(init: &mut Init, name: &str, fan_in: usize, fan_out: usize, std: f64) -> Self {
        Self {
            w: init.normal(&format!("{name}.weight"), &[fan_in, fan_out], std),
            b: init.constant(&format!("{name}.bias"), &[fan_out], 0.0),
        }
    }

    pub fn uniform(init: &mut Init, name: &str, fan_in: usize, fan_out: usize, bound: f64) -> Self {
        Self {
            w: init.uniform(&format!("{name}.weight"), &[fan_in, fan_out], bound),
            b: init.constant(&format!("{name}.bias"), &[fan_out], 0.0),
        }
    }

    pub fn apply<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>, ModelError> {
        Ok(x.matmul(ctx.p(self.w))?.add(ctx.p(self.b))?)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Self {
        Self {
            gamma: init.constant(&format!("{name}.gamma"), &[dim], 1.0),
            beta: init.constant(&format!("{name}.beta"), &[dim], 0.0),
        }
    }

    pub fn apply<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>, ModelError> {
        Ok(x.layer_norm(ctx.p(self.gamma), ctx.p(self.beta), 1e-5)?)
    }
}

/// Scaled dot-product attention of `query [B,T,d]` over `keys [B,S,d]`.
/// `bias` is added to the `[B,T,S]` scores before the softmax and carries
/// −∞ at masked positions. Returns the context `[B,T,dv]` and the weights.
pub fn attend<'t>(
    query: Var<'t>,
    keys: Var<'t>,
    values: Var<'t>,
    bias: Option<Var<'t>>,
    scale: f64,
) -> Result<(Var<'t>, Var<'t>), ModelError> {
    let mut scores = query.matmul(keys.transpose(1, 2)?)?;
    if scale != 1.0 {
        scores = scores.scale(scale);
    }
    if let Some(bias) = bias {
        scores = scores.add(bias)?;
    }
    let weights = scores.softmax(2)?;
    Ok((weights.matmul(values)?, weights))
}

/// `[B,T]` additive bias: 0 where `keep`, −∞ elsewhere, shaped `[B,1,T]`.
pub(crate) fn key_bias(keep: &[bool], batch: usize, len: usize) -> Tensor {
    Tensor::from_fn(&[batch, 1, len], |i| if keep[i] { 0.0 } else { f64::NEG_INFINITY })
}

/// `[T,T]` additive bias hiding future positions.
pub(crate) fn causal_bias(len: usize) -> Tensor {
    Tensor::from_fn(&[len, len], |i| if i % len > i / len { f64::NEG_INFINITY } else { 0.0 })
}

/// `[B,T,1]` multiplicative mask: 1 where `keep`, 0 elsewhere.
pub(crate) fn keep_mask(keep: &[bool], batch: usize, len: usize) -> Tensor {
    Tensor::from_fn(&[batch, len, 1], |i| if keep[i] { 1.0 } else { 0.0 })
}

/// Sinusoidal position table `[len, dim]`.
pub(crate) fn sinusoids(len: usize, dim: usize) -> Tensor {
    sinusoids_from(0, len, dim)
}

/// Rows `start..start+len` of the sinusoidal table.
pub(crate) fn sinusoids_from(start: usize, len: usize, dim: usize) -> Tensor {
    Tensor::from_fn(&[len, dim], |i| {
        let (pos, j) = ((start + i / dim) as f64, i % dim);
        let freq = 10000f64.powf(-((j / 2 * 2) as f64) / dim as f64);
        if j % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}

/// Rows `rows` of a tensor along its first axis; repeats allowed.
pub(crate) fn select_rows(t: &Tensor, rows: &[usize]) -> Tensor {
    let inner = t.numel() / t.shape()[0];
    let mut data = Vec::with_capacity(rows.len() * inner);
    for &r in rows {
        data.extend_from_slice(&t.data()[r * inner..(r + 1) * inner]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    Tensor::new(&shape, data).expect("row selection keeps shape")
}

/// Appends `[B,n,D]` after `[B,t,D]` along the time axis.
pub(crate) fn append_steps(past: Option<&Tensor>, new: &Tensor) -> Tensor {
    let Some(past) = past else { return new.clone() };
    let (b, t, n, d) = (past.shape()[0], past.shape()[1], new.shape()[1], past.shape()[2]);
    let mut data = Vec::with_capacity(b * (t + n) * d);
    for r in 0..b {
        data.extend_from_slice(&past.data()[r * t * d..(r + 1) * t * d]);
        data.extend_from_slice(&new.data()[r * n * d..(r + 1) * n * d]);
    }
    Tensor::new(&[b, t + n, d], data).expect("matching batch and width")
}

/// Drops the oldest step of `[B,K,D]` and appends `[B,1,D]`.
pub(crate) fn shift_window(window: &Tensor, new: &Tensor) -> Tensor {
    let (b, k, d) = (window.shape()[0], window.shape()[1], window.shape()[2]);
    let mut data = Vec::with_capacity(b * k * d);
    for r in 0..b {
        data.extend_from_slice(&window.data()[r * k * d + d..(r + 1) * k * d]);
        data.extend_from_slice(&new.data()[r * d..(r + 1) * d]);
    }
    Tensor::new(&[b, k, d], data).expect("matching batch and width")
}
