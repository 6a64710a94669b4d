use crate::autodiff::{PadMode, ParamId, Tensor, Var};

use super::layers::{attend, keep_mask, key_bias, shift_window, Init, Linear};
use super::{ConvConfig, Ctx, IdBatch, Memory, ModelError};

/// Convolution producing `2·dim` channels, halved again by a GLU.
#[derive(Debug, Clone)]
struct GatedConv {
    kernel: ParamId,
    bias: ParamId,
}

impl GatedConv {
    fn new(init: &mut Init, name: &str, width: usize, dim: usize) -> Self {
        let std = (1.0 / (width * dim) as f64).sqrt();
        Self {
            kernel: init.normal(&format!("{name}.kernel"), &[width, dim, 2 * dim], std),
            bias: init.constant(&format!("{name}.bias"), &[2 * dim], 0.0),
        }
    }

    fn apply<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, mode: PadMode) -> Result<Var<'t>, ModelError> {
        Ok(x.conv1d(ctx.p(self.kernel), ctx.p(self.bias), mode)?.glu()?)
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    conv: GatedConv,
    query: Linear,
}

#[derive(Debug, Clone)]
pub(crate) struct ConvNet {
    config: ConvConfig,
    src_embed: ParamId,
    tgt_embed: ParamId,
    src_pos: ParamId,
    tgt_pos: ParamId,
    encoder: Vec<GatedConv>,
    decoder: Vec<DecoderLayer>,
    pub output: Linear,
}

impl ConvNet {
    pub fn set_dropout(&mut self, p: f64) {
        self.config.dropout = p;
    }

    pub fn new(init: &mut Init, c: &ConvConfig, src_vocab: usize, tgt_vocab: usize) -> Self {
        let d = c.dim;
        let std = 1.0 / (d as f64).sqrt();
        let src_embed = init.uniform("encoder.embed", &[src_vocab, d], 0.1);
        let tgt_embed = init.uniform("decoder.embed", &[tgt_vocab, d], 0.1);
        let src_pos = init.uniform("encoder.positions", &[c.max_positions, d], 0.1);
        let tgt_pos = init.uniform("decoder.positions", &[c.max_positions, d], 0.1);
        let encoder = (0..c.enc_layers)
            .map(|l| GatedConv::new(init, &format!("encoder.{l}"), c.kernel_width, d))
            .collect();
        let decoder = (0..c.dec_layers)
            .map(|l| DecoderLayer {
                conv: GatedConv::new(init, &format!("decoder.{l}"), c.kernel_width, d),
                query: Linear::normal(init, &format!("decoder.{l}.query"), d, d, std),
            })
            .collect();
        let output = Linear::normal(init, "output", d, tgt_vocab, std);
        Self {
            config: c.clone(),
            src_embed,
            tgt_embed,
            src_pos,
            tgt_pos,
            encoder,
            decoder,
            output,
        }
    }

    fn embed<'t>(&self, ctx: &Ctx<'t>, table: ParamId, positions: ParamId, ids: &IdBatch) -> Result<Var<'t>, ModelError> {
        let (b, t) = (ids.batch(), ids.len());
        if t > self.config.max_positions {
            return Err(ModelError::TooLong {
                len: t,
                max: self.config.max_positions,
            });
        }
        let tokens = ctx.p(table).embedding(&ids.indices(), &[b, t])?;
        Ok(tokens.add(ctx.p(positions).slice(0, 0, t)?)?)
    }

    pub fn encode<'t>(&self, ctx: &Ctx<'t>, src: &IdBatch) -> Result<Memory<'t>, ModelError> {
        let (b, s) = (src.batch(), src.len());
        let keep = src.keep();
        let mask = ctx.constant(keep_mask(&keep, b, s));
        let p = self.config.dropout;
        let embedded = ctx.dropout(self.embed(ctx, self.src_embed, self.src_pos, src)?, p);
        let mut x = embedded;
        for layer in &self.encoder {
            let input = ctx.dropout(x, p).mul(mask)?;
            x = layer.apply(ctx, input, PadMode::Same)?.add(x)?;
        }
        let states = x.mul(mask)?;
        Ok(Memory {
            states,
            values: states.add(embedded)?,
            key_bias: ctx.constant(key_bias(&keep, b, s)),
            init: Vec::new(),
            fully_masked: keep.chunks(s).map(|row| !row.contains(&true)).collect(),
        })
    }

    pub fn decode_hidden<'t>(&self, ctx: &Ctx<'t>, memory: &Memory<'t>, prefix: &IdBatch) -> Result<Var<'t>, ModelError> {
        let p = self.config.dropout;
        let scale = 1.0 / (self.config.dim as f64).sqrt();
        let embedded = ctx.dropout(self.embed(ctx, self.tgt_embed, self.tgt_pos, prefix)?, p);
        let mut x = embedded;
        for layer in &self.decoder {
            let h = layer.conv.apply(ctx, ctx.dropout(x, p), PadMode::Causal)?;
            let query = layer.query.apply(ctx, h)?.add(embedded)?;
            let (context, _) = attend(query, memory.states, memory.values, Some(memory.key_bias), scale)?;
            x = h.add(context)?.add(x)?;
        }
        Ok(ctx.dropout(x, p))
    }

    /// Zero windows, matching the causal convolution's left padding.
    pub fn empty_windows(&self, batch: usize) -> Vec<Tensor> {
        let shape = [batch, self.config.kernel_width, self.config.dim];
        self.decoder.iter().map(|_| Tensor::zeros(&shape)).collect()
    }

    /// Hidden state `[B,1,D]` for one new token at position `pos`.
    pub fn step<'t>(
        &self,
        ctx: &Ctx<'t>,
        memory: &Memory<'t>,
        windows: &mut [Tensor],
        tokens: &IdBatch,
        pos: usize,
    ) -> Result<Var<'t>, ModelError> {
        let (b, k) = (tokens.batch(), self.config.kernel_width);
        if pos >= self.config.max_positions {
            return Err(ModelError::TooLong {
                len: pos + 1,
                max: self.config.max_positions,
            });
        }
        let scale = 1.0 / (self.config.dim as f64).sqrt();
        let embedded = ctx
            .p(self.tgt_embed)
            .embedding(&tokens.indices(), &[b, 1])?
            .add(ctx.p(self.tgt_pos).slice(0, pos, pos + 1)?)?;
        let mut x = embedded;
        for (l, layer) in self.decoder.iter().enumerate() {
            windows[l] = shift_window(&windows[l], &x.value());
            let window = ctx.constant(windows[l].clone());
            let h = layer.conv.apply(ctx, window, PadMode::Causal)?.slice(1, k - 1, k)?;
            let query = layer.query.apply(ctx, h)?.add(embedded)?;
            let (context, _) = attend(query, memory.states, memory.values, Some(memory.key_bias), scale)?;
            x = h.add(context)?.add(x)?;
        }
        Ok(x)
    }
}
