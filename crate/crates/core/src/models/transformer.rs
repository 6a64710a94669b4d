use crate::autodiff::{ParamId, Tensor, Var};

use super::layers::{append_steps, attend, causal_bias, key_bias, select_rows, sinusoids, sinusoids_from, Init, Linear, Norm};
use super::{Ctx, IdBatch, Memory, ModelError, TransformerConfig};

#[derive(Debug, Clone)]
struct MultiHead {
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
}

impl MultiHead {
    fn new(init: &mut Init, name: &str, d: usize, std: f64) -> Self {
        Self {
            query: Linear::normal(init, &format!("{name}.q"), d, d, std),
            key: Linear::normal(init, &format!("{name}.k"), d, d, std),
            value: Linear::normal(init, &format!("{name}.v"), d, d, std),
            out: Linear::normal(init, &format!("{name}.o"), d, d, std),
        }
    }

    fn apply<'t>(
        &self,
        ctx: &Ctx<'t>,
        x: Var<'t>,
        source: Var<'t>,
        bias: Option<Var<'t>>,
        heads: &[usize],
    ) -> Result<Var<'t>, ModelError> {
        let q = self.query.apply(ctx, x)?;
        let k = self.key.apply(ctx, source)?;
        let v = self.value.apply(ctx, source)?;
        self.attend_projected(ctx, q, k, v, bias, heads)
    }

    /// Attention from already projected queries, keys and values.
    fn attend_projected<'t>(
        &self,
        ctx: &Ctx<'t>,
        q: Var<'t>,
        k: Var<'t>,
        v: Var<'t>,
        bias: Option<Var<'t>>,
        heads: &[usize],
    ) -> Result<Var<'t>, ModelError> {
        let mut parts = Vec::with_capacity(heads.len());
        let mut offset = 0;
        for &width in heads {
            let scale = 1.0 / (width as f64).sqrt();
            let (context, _) = if heads.len() == 1 {
                attend(q, k, v, bias, scale)?
            } else {
                let range = offset..offset + width;
                attend(
                    q.slice(2, range.start, range.end)?,
                    k.slice(2, range.start, range.end)?,
                    v.slice(2, range.start, range.end)?,
                    bias,
                    scale,
                )?
            };
            parts.push(context);
            offset += width;
        }
        let joined = if parts.len() == 1 { parts[0] } else { ctx.tape.concat(&parts, 2)? };
        self.out.apply(ctx, joined)
    }
}

#[derive(Debug, Clone)]
struct FeedForward {
    inner: Linear,
    outer: Linear,
}

impl FeedForward {
    fn new(init: &mut Init, name: &str, d: usize, f: usize, std: f64) -> Self {
        Self {
            inner: Linear::normal(init, &format!("{name}.fc1"), d, f, std),
            outer: Linear::normal(init, &format!("{name}.fc2"), f, d, std),
        }
    }

    fn apply<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, dropout: f64) -> Result<Var<'t>, ModelError> {
        let h = ctx.dropout(self.inner.apply(ctx, x)?.relu(), dropout);
        self.outer.apply(ctx, h)
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn_norm: Norm,
    attn: MultiHead,
    ffn_norm: Norm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_norm: Norm,
    self_attn: MultiHead,
    cross_norm: Norm,
    cross_attn: MultiHead,
    ffn_norm: Norm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub(crate) struct TransformerNet {
    config: TransformerConfig,
    heads: Vec<usize>,
    src_embed: ParamId,
    tgt_embed: ParamId,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    enc_norm: Norm,
    dec_norm: Norm,
    pub output: Linear,
}

impl TransformerNet {
    pub fn set_dropout(&mut self, p: f64) {
        self.config.dropout = p;
    }

    pub fn new(init: &mut Init, c: &TransformerConfig, src_vocab: usize, tgt_vocab: usize) -> Self {
        let d = c.d_model;
        let std = 1.0 / (d as f64).sqrt();
        let src_embed = init.uniform("encoder.embed", &[src_vocab, d], 0.1);
        let tgt_embed = init.uniform("decoder.embed", &[tgt_vocab, d], 0.1);
        let encoder = (0..c.enc_layers)
            .map(|l| {
                let name = format!("encoder.{l}");
                EncoderLayer {
                    attn_norm: Norm::new(init, &format!("{name}.attn_norm"), d),
                    attn: MultiHead::new(init, &format!("{name}.attn"), d, std),
                    ffn_norm: Norm::new(init, &format!("{name}.ffn_norm"), d),
                    ffn: FeedForward::new(init, &format!("{name}.ffn"), d, c.d_ffn, std),
                }
            })
            .collect();
        let enc_norm = Norm::new(init, "encoder.norm", d);
        let decoder = (0..c.dec_layers)
            .map(|l| {
                let name = format!("decoder.{l}");
                DecoderLayer {
                    self_norm: Norm::new(init, &format!("{name}.self_norm"), d),
                    self_attn: MultiHead::new(init, &format!("{name}.self_attn"), d, std),
                    cross_norm: Norm::new(init, &format!("{name}.cross_norm"), d),
                    cross_attn: MultiHead::new(init, &format!("{name}.cross_attn"), d, std),
                    ffn_norm: Norm::new(init, &format!("{name}.ffn_norm"), d),
                    ffn: FeedForward::new(init, &format!("{name}.ffn"), d, c.d_ffn, std),
                }
            })
            .collect();
        let dec_norm = Norm::new(init, "decoder.norm", d);
        let output = Linear::normal(init, "output", d, tgt_vocab, std);
        Self {
            config: c.clone(),
            heads: c.head_dims(),
            src_embed,
            tgt_embed,
            encoder,
            decoder,
            enc_norm,
            dec_norm,
            output,
        }
    }

    fn embed<'t>(&self, ctx: &Ctx<'t>, table: ParamId, ids: &IdBatch) -> Result<Var<'t>, ModelError> {
        let (b, t, d) = (ids.batch(), ids.len(), self.config.d_model);
        if t > self.config.max_positions {
            return Err(ModelError::TooLong {
                len: t,
                max: self.config.max_positions,
            });
        }
        let tokens = ctx.p(table).embedding(&ids.indices(), &[b, t])?;
        let x = tokens.scale((d as f64).sqrt()).add(ctx.constant(sinusoids(t, d)))?;
        Ok(ctx.dropout(x, self.config.dropout))
    }

    pub fn encode<'t>(&self, ctx: &Ctx<'t>, src: &IdBatch) -> Result<Memory<'t>, ModelError> {
        let (b, s) = (src.batch(), src.len());
        let keep = src.keep();
        let bias = ctx.constant(key_bias(&keep, b, s));
        let p = self.config.dropout;
        let mut x = self.embed(ctx, self.src_embed, src)?;
        for layer in &self.encoder {
            let h = layer.attn_norm.apply(ctx, x)?;
            let h = layer.attn.apply(ctx, h, h, Some(bias), &self.heads)?;
            x = x.add(ctx.dropout(h, p))?;
            let h = layer.ffn.apply(ctx, layer.ffn_norm.apply(ctx, x)?, p)?;
            x = x.add(ctx.dropout(h, p))?;
        }
        let states = self.enc_norm.apply(ctx, x)?;
        Ok(Memory {
            states,
            values: states,
            key_bias: bias,
            init: Vec::new(),
            fully_masked: keep.chunks(s).map(|row| !row.contains(&true)).collect(),
        })
    }

    pub fn decode_hidden<'t>(&self, ctx: &Ctx<'t>, memory: &Memory<'t>, prefix: &IdBatch) -> Result<Var<'t>, ModelError> {
        let p = self.config.dropout;
        let causal = ctx.constant(causal_bias(prefix.len()));
        let mut x = self.embed(ctx, self.tgt_embed, prefix)?;
        for layer in &self.decoder {
            let h = layer.self_norm.apply(ctx, x)?;
            let h = layer.self_attn.apply(ctx, h, h, Some(causal), &self.heads)?;
            x = x.add(ctx.dropout(h, p))?;
            let h = layer.cross_norm.apply(ctx, x)?;
            let h = layer
                .cross_attn
                .apply(ctx, h, memory.states, Some(memory.key_bias), &self.heads)?;
            x = x.add(ctx.dropout(h, p))?;
            let h = layer.ffn.apply(ctx, layer.ffn_norm.apply(ctx, x)?, p)?;
            x = x.add(ctx.dropout(h, p))?;
        }
        self.dec_norm.apply(ctx, x)
    }

    /// Cross-attention keys and values projected once per source.
    pub fn start_cache<'t>(&self, ctx: &Ctx<'t>, memory: &Memory<'t>) -> Result<Cache, ModelError> {
        let n = self.decoder.len();
        let mut cache = Cache {
            self_keys: vec![None; n],
            self_values: vec![None; n],
            cross_keys: Vec::with_capacity(n),
            cross_values: Vec::with_capacity(n),
        };
        for layer in &self.decoder {
            cache.cross_keys.push((*layer.cross_attn.key.apply(ctx, memory.states)?.value()).clone());
            cache.cross_values.push((*layer.cross_attn.value.apply(ctx, memory.states)?.value()).clone());
        }
        Ok(cache)
    }

    /// Hidden state `[B,1,d]` for one new token at position `pos`.
    pub fn step<'t>(
        &self,
        ctx: &Ctx<'t>,
        memory: &Memory<'t>,
        cache: &mut Cache,
        tokens: &IdBatch,
        pos: usize,
    ) -> Result<Var<'t>, ModelError> {
        let (b, d) = (tokens.batch(), self.config.d_model);
        if pos >= self.config.max_positions {
            return Err(ModelError::TooLong {
                len: pos + 1,
                max: self.config.max_positions,
            });
        }
        let embedded = ctx.p(self.tgt_embed).embedding(&tokens.indices(), &[b, 1])?;
        let mut x = embedded.scale((d as f64).sqrt()).add(ctx.constant(sinusoids_from(pos, 1, d)))?;
        for (l, layer) in self.decoder.iter().enumerate() {
            let h = layer.self_norm.apply(ctx, x)?;
            let attn = &layer.self_attn;
            let q = attn.query.apply(ctx, h)?;
            let keys = append_steps(cache.self_keys[l].as_ref(), &attn.key.apply(ctx, h)?.value());
            let values = append_steps(cache.self_values[l].as_ref(), &attn.value.apply(ctx, h)?.value());
            let k = ctx.constant(keys.clone());
            let v = ctx.constant(values.clone());
            cache.self_keys[l] = Some(keys);
            cache.self_values[l] = Some(values);
            x = x.add(attn.attend_projected(ctx, q, k, v, None, &self.heads)?)?;
            let h = layer.cross_norm.apply(ctx, x)?;
            let q = layer.cross_attn.query.apply(ctx, h)?;
            let k = ctx.constant(cache.cross_keys[l].clone());
            let v = ctx.constant(cache.cross_values[l].clone());
            x = x.add(
                layer
                    .cross_attn
                    .attend_projected(ctx, q, k, v, Some(memory.key_bias), &self.heads)?,
            )?;
            let h = layer.ffn.apply(ctx, layer.ffn_norm.apply(ctx, x)?, 0.0)?;
            x = x.add(h)?;
        }
        self.dec_norm.apply(ctx, x)
    }
}

/// Per-layer self-attention keys/values so far and projected memory.
#[derive(Debug, Clone)]
pub(crate) struct Cache {
    self_keys: Vec<Option<Tensor>>,
    self_values: Vec<Option<Tensor>>,
    cross_keys: Vec<Tensor>,
    cross_values: Vec<Tensor>,
}

impl Cache {
    pub fn select(&self, rows: &[usize]) -> Cache {
        let pick = |t: &Tensor| select_rows(t, rows);
        Cache {
            self_keys: self.self_keys.iter().map(|t| t.as_ref().map(pick)).collect(),
            self_values: self.self_values.iter().map(|t| t.as_ref().map(pick)).collect(),
            cross_keys: self.cross_keys.iter().map(pick).collect(),
            cross_values: self.cross_values.iter().map(pick).collect(),
        }
    }
}
