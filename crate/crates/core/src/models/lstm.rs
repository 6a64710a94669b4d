use crate::autodiff::{ParamId, Tensor, Var};

use super::layers::{attend, key_bias, Init, Linear};
use super::{Ctx, IdBatch, LstmConfig, Memory, ModelError};

const INIT_BOUND: f64 = 0.1;

/// One LSTM layer; gates are laid out as input, forget, cell, output.
#[derive(Debug, Clone)]
struct Cell {
    input: ParamId,
    recurrent: ParamId,
    bias: ParamId,
    hidden: usize,
}

impl Cell {
    fn new(init: &mut Init, name: &str, input: usize, hidden: usize) -> Self {
        Self {
            input: init.uniform(&format!("{name}.weight_ih"), &[input, 4 * hidden], INIT_BOUND),
            recurrent: init.uniform(&format!("{name}.weight_hh"), &[hidden, 4 * hidden], INIT_BOUND),
            bias: init.constant(&format!("{name}.bias"), &[4 * hidden], 0.0),
            hidden,
        }
    }

    /// Runs over `[B,T,in]`. Where `keep` is false the state is carried
    /// through unchanged, so trailing padding never alters a final state.
    fn run<'t>(
        &self,
        ctx: &Ctx<'t>,
        inputs: Var<'t>,
        keep: Option<&[bool]>,
        reverse: bool,
        start: (Var<'t>, Var<'t>),
    ) -> Result<(Var<'t>, (Var<'t>, Var<'t>)), ModelError> {
        let shape = inputs.shape();
        let (b, t, hd) = (shape[0], shape[1], self.hidden);
        let pre = inputs.matmul(ctx.p(self.input))?.add(ctx.p(self.bias))?;
        let recurrent = ctx.p(self.recurrent);
        let (mut h, mut c) = start;
        let mut outputs = vec![None; t];
        let steps: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for step in steps {
            let gates = pre.slice(1, step, step + 1)?.reshape(&[b, 4 * hd])?.add(h.matmul(recurrent)?)?;
            let i = gates.slice(1, 0, hd)?.sigmoid();
            let f = gates.slice(1, hd, 2 * hd)?.sigmoid();
            let g = gates.slice(1, 2 * hd, 3 * hd)?.tanh();
            let o = gates.slice(1, 3 * hd, 4 * hd)?.sigmoid();
            let c_new = f.mul(c)?.add(i.mul(g)?)?;
            let h_new = o.mul(c_new.tanh())?;
            match keep {
                Some(keep) if (0..b).any(|r| !keep[r * t + step]) => {
                    let on = Tensor::from_fn(&[b, 1], |r| if keep[r * t + step] { 1.0 } else { 0.0 });
                    let off = Tensor::from_fn(&[b, 1], |r| if keep[r * t + step] { 0.0 } else { 1.0 });
                    let (on, off) = (ctx.constant(on), ctx.constant(off));
                    h = h_new.mul(on)?.add(h.mul(off)?)?;
                    c = c_new.mul(on)?.add(c.mul(off)?)?;
                }
                _ => {
                    h = h_new;
                    c = c_new;
                }
            }
            outputs[step] = Some(h.reshape(&[b, 1, hd])?);
        }
        let outputs: Vec<Var<'t>> = outputs.into_iter().map(|o| o.expect("every step visited")).collect();
        let stacked = if t == 1 { outputs[0] } else { ctx.tape.concat(&outputs, 1)? };
        Ok((stacked, (h, c)))
    }
}

impl Cell {
    /// One unmasked step from `[B,in]`.
    fn step<'t>(&self, ctx: &Ctx<'t>, input: Var<'t>, (h, c): (Var<'t>, Var<'t>)) -> Result<(Var<'t>, Var<'t>), ModelError> {
        let hd = self.hidden;
        let gates = input
            .matmul(ctx.p(self.input))?
            .add(ctx.p(self.bias))?
            .add(h.matmul(ctx.p(self.recurrent))?)?;
        let i = gates.slice(1, 0, hd)?.sigmoid();
        let f = gates.slice(1, hd, 2 * hd)?.sigmoid();
        let g = gates.slice(1, 2 * hd, 3 * hd)?.tanh();
        let o = gates.slice(1, 3 * hd, 4 * hd)?.sigmoid();
        let c_new = f.mul(c)?.add(i.mul(g)?)?;
        let h_new = o.mul(c_new.tanh())?;
        Ok((h_new, c_new))
    }
}

#[derive(Debug, Clone)]
struct Bridge {
    states: Linear,
    hidden: Vec<Linear>,
    cell: Vec<Linear>,
}

#[derive(Debug, Clone)]
pub(crate) struct LstmNet {
    config: LstmConfig,
    src_embed: ParamId,
    tgt_embed: ParamId,
    forward: Vec<Cell>,
    backward: Vec<Cell>,
    bridge: Option<Bridge>,
    decoder: Vec<Cell>,
    combine: Option<Linear>,
    pub output: Linear,
}

impl LstmNet {
    pub fn set_dropout(&mut self, p: f64) {
        self.config.dropout = p;
    }

    pub fn new(init: &mut Init, c: &LstmConfig, src_vocab: usize, tgt_vocab: usize) -> Self {
        let (e, h) = (c.embed_dim, c.hidden_dim);
        let src_embed = init.uniform("encoder.embed", &[src_vocab, e], INIT_BOUND);
        let tgt_embed = init.uniform("decoder.embed", &[tgt_vocab, e], INIT_BOUND);
        let enc_width = if c.bidirectional { 2 * h } else { h };
        let layer_input = |l: usize| if l == 0 { e } else { enc_width };
        let forward = (0..c.layers)
            .map(|l| Cell::new(init, &format!("encoder.fwd.{l}"), layer_input(l), h))
            .collect();
        let (backward, bridge) = if c.bidirectional {
            let backward = (0..c.layers)
                .map(|l| Cell::new(init, &format!("encoder.bwd.{l}"), layer_input(l), h))
                .collect();
            let bridge = Bridge {
                states: Linear::uniform(init, "bridge.states", 2 * h, h, INIT_BOUND),
                hidden: (0..c.layers)
                    .map(|l| Linear::uniform(init, &format!("bridge.hidden.{l}"), 2 * h, h, INIT_BOUND))
                    .collect(),
                cell: (0..c.layers)
                    .map(|l| Linear::uniform(init, &format!("bridge.cell.{l}"), 2 * h, h, INIT_BOUND))
                    .collect(),
            };
            (backward, Some(bridge))
        } else {
            (Vec::new(), None)
        };
        let decoder = (0..c.layers)
            .map(|l| Cell::new(init, &format!("decoder.{l}"), if l == 0 { e } else { h }, h))
            .collect();
        let combine = c
            .attention
            .then(|| Linear::uniform(init, "decoder.combine", 2 * h, h, INIT_BOUND));
        let output = Linear::uniform(init, "output", h, tgt_vocab, INIT_BOUND);
        Self {
            config: c.clone(),
            src_embed,
            tgt_embed,
            forward,
            backward,
            bridge,
            decoder,
            combine,
            output,
        }
    }

    fn zeros<'t>(&self, ctx: &Ctx<'t>, b: usize) -> (Var<'t>, Var<'t>) {
        let z = ctx.constant(Tensor::zeros(&[b, self.config.hidden_dim]));
        (z, z)
    }

    /// Encoder states before the bidirectional projection: `[B,S,H]`, or
    /// `[B,S,2H]` when bidirectional, plus the final state of every layer.
    #[allow(clippy::type_complexity)]
    pub(crate) fn raw_encode<'t>(
        &self,
        ctx: &Ctx<'t>,
        src: &IdBatch,
    ) -> Result<(Var<'t>, Vec<(Var<'t>, Var<'t>)>), ModelError> {
        let (b, s) = (src.batch(), src.len());
        let keep = src.keep();
        let p = self.config.dropout;
        let mut x = ctx.dropout(ctx.p(self.src_embed).embedding(&src.indices(), &[b, s])?, p);
        let mut finals = Vec::new();
        for l in 0..self.config.layers {
            if l > 0 {
                x = ctx.dropout(x, p);
            }
            let (fwd, fwd_final) = self.forward[l].run(ctx, x, Some(&keep), false, self.zeros(ctx, b))?;
            if self.config.bidirectional {
                let (bwd, bwd_final) = self.backward[l].run(ctx, x, Some(&keep), true, self.zeros(ctx, b))?;
                x = ctx.tape.concat(&[fwd, bwd], 2)?;
                let h = ctx.tape.concat(&[fwd_final.0, bwd_final.0], 1)?;
                let c = ctx.tape.concat(&[fwd_final.1, bwd_final.1], 1)?;
                finals.push((h, c));
            } else {
                x = fwd;
                finals.push(fwd_final);
            }
        }
        Ok((x, finals))
    }

    pub fn encode<'t>(&self, ctx: &Ctx<'t>, src: &IdBatch) -> Result<Memory<'t>, ModelError> {
        let (b, s) = (src.batch(), src.len());
        let keep = src.keep();
        let (raw, finals) = self.raw_encode(ctx, src)?;
        let (states, init) = match &self.bridge {
            Some(bridge) => {
                let states = bridge.states.apply(ctx, raw)?;
                let mut init = Vec::with_capacity(finals.len());
                for (l, &(h, c)) in finals.iter().enumerate() {
                    init.push((bridge.hidden[l].apply(ctx, h)?, bridge.cell[l].apply(ctx, c)?));
                }
                (states, init)
            }
            None => (raw, finals),
        };
        Ok(Memory {
            states,
            values: states,
            key_bias: ctx.constant(key_bias(&keep, b, s)),
            init,
            fully_masked: keep.chunks(s).map(|row| !row.contains(&true)).collect(),
        })
    }

    pub fn decode_hidden<'t>(&self, ctx: &Ctx<'t>, memory: &Memory<'t>, prefix: &IdBatch) -> Result<Var<'t>, ModelError> {
        let (b, t) = (prefix.batch(), prefix.len());
        let p = self.config.dropout;
        let mut x = ctx.dropout(ctx.p(self.tgt_embed).embedding(&prefix.indices(), &[b, t])?, p);
        for (l, cell) in self.decoder.iter().enumerate() {
            if l > 0 {
                x = ctx.dropout(x, p);
            }
            x = cell.run(ctx, x, None, false, memory.init[l])?.0;
        }
        let out = match self.combine {
            Some(combine) => {
                let (context, _) = attend(x, memory.states, memory.values, Some(memory.key_bias), 1.0)?;
                combine.apply(ctx, ctx.tape.concat(&[context, x], 2)?)?.tanh()
            }
            None => x,
        };
        Ok(ctx.dropout(out, p))
    }

    /// Hidden output `[B,1,H]` for one new token; updates `state`.
    pub fn step<'t>(
        &self,
        ctx: &Ctx<'t>,
        memory: &Memory<'t>,
        state: &mut [(Tensor, Tensor)],
        tokens: &IdBatch,
    ) -> Result<Var<'t>, ModelError> {
        let b = tokens.batch();
        let e = self.config.embed_dim;
        let mut x = ctx.p(self.tgt_embed).embedding(&tokens.indices(), &[b, 1])?.reshape(&[b, e])?;
        for (l, cell) in self.decoder.iter().enumerate() {
            let (h, c) = &state[l];
            let (h, c) = cell.step(ctx, x, (ctx.constant(h.clone()), ctx.constant(c.clone())))?;
            state[l] = ((*h.value()).clone(), (*c.value()).clone());
            x = h;
        }
        let x = x.reshape(&[b, 1, self.config.hidden_dim])?;
        Ok(match self.combine {
            Some(combine) => {
                let (context, _) = attend(x, memory.states, memory.values, Some(memory.key_bias), 1.0)?;
                combine.apply(ctx, ctx.tape.concat(&[context, x], 2)?)?.tanh()
            }
            None => x,
        })
    }
}
