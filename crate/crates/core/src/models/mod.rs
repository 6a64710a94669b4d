//! Encoder-decoder architectures built on [`crate::autodiff`]: a
//! unidirectional and a bidirectional LSTM with dot attention, a gated
//! convolutional model, and a pre-norm transformer.
//!
//! All four expose the same surface: [`SeqModel::encode`] turns a padded
//! source batch into a [`Memory`], and [`SeqModel::decode`] produces
//! teacher-forced logits for a target prefix that starts with BOS.

mod config;
mod conv;
mod layers;
mod lstm;
mod transformer;

use std::cell::RefCell;

use thiserror::Error;

use crate::autodiff::{ParamId, ParamStore, RngState, Tape, Tensor, TensorError, Var};
use crate::subword::{PAD, SPECIAL_TOKENS};

pub use config::{Arch, ConvConfig, LstmConfig, ModelConfig, TransformerConfig};
pub use layers::attend;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} out of range for vocabulary of {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("target prefix is empty")]
    EmptyPrefix,
    #[error("every target position is padding")]
    AllPad,
    #[error("sequence of length {len} exceeds max_positions {max}")]
    TooLong { len: usize, max: usize },
    #[error("batch shape mismatch: {0}")]
    Batch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Row-major `[batch, len]` block of token ids, right-padded with PAD.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdBatch {
    ids: Vec<u32>,
    batch: usize,
    len: usize,
}

impl IdBatch {
    pub fn new(ids: Vec<u32>, batch: usize, len: usize) -> Result<Self, ModelError> {
        if batch == 0 || len == 0 || ids.len() != batch * len {
            return Err(ModelError::Batch(format!("{} ids for [{batch}, {len}]", ids.len())));
        }
        Ok(Self { ids, batch, len })
    }

    /// Pads every row to the longest one. Rows may be empty; the width is
    /// at least one.
    pub fn from_rows<R: AsRef<[u32]>>(rows: &[R]) -> Result<Self, ModelError> {
        let len = rows.iter().map(|r| r.as_ref().len()).max().unwrap_or(0).max(1);
        let mut ids = Vec::with_capacity(rows.len() * len);
        for row in rows {
            let row = row.as_ref();
            ids.extend_from_slice(row);
            ids.extend(std::iter::repeat(PAD).take(len - row.len()));
        }
        Self::new(ids, rows.len(), len)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }

    /// True at non-pad positions.
    pub fn keep(&self) -> Vec<bool> {
        self.ids.iter().map(|&i| i != PAD).collect()
    }

    /// Number of non-pad tokens.
    pub fn tokens(&self) -> usize {
        self.ids.iter().filter(|&&i| i != PAD).count()
    }

    pub(crate) fn indices(&self) -> Vec<usize> {
        self.ids.iter().map(|&i| i as usize).collect()
    }

    fn check(&self, size: usize) -> Result<(), ModelError> {
        match self.ids.iter().find(|&&i| i as usize >= size) {
            Some(&id) => Err(ModelError::IdOutOfRange { id, size }),
            None => Ok(()),
        }
    }
}

/// Per-forward state: the tape, the parameters, and dropout randomness.
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    pub store: &'t ParamStore,
    rng: RefCell<Option<RngState>>,
}

impl<'t> Ctx<'t> {
    /// Inference: dropout disabled.
    pub fn eval(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Self {
            tape,
            store,
            rng: RefCell::new(None),
        }
    }

    /// Training: dropout masks drawn from `rng`.
    pub fn train(tape: &'t Tape, store: &'t ParamStore, rng: RngState) -> Self {
        Self {
            tape,
            store,
            rng: RefCell::new(Some(rng)),
        }
    }

    pub fn training(&self) -> bool {
        self.rng.borrow().is_some()
    }

    /// Hands back the dropout stream, advanced past this forward pass.
    pub fn into_rng(self) -> Option<RngState> {
        self.rng.into_inner()
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        self.tape.param(self.store, id)
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    pub fn dropout(&self, x: Var<'t>, p: f64) -> Var<'t> {
        match self.rng.borrow_mut().as_mut() {
            Some(rng) => x.dropout(p, rng, true),
            None => x,
        }
    }
}

/// Encoder output consumed by the decoder.
#[derive(Debug, Clone)]
pub struct Memory<'t> {
    /// Per-position states `[B,S,D]`; attention keys.
    pub states: Var<'t>,
    /// Attention values `[B,S,D]` (differs from `states` for the conv model).
    pub values: Var<'t>,
    /// `[B,1,S]` additive mask, −∞ at pad positions.
    pub key_bias: Var<'t>,
    /// Recurrent decoder initial `(h, c)` per layer, each `[B,H]`.
    pub init: Vec<(Var<'t>, Var<'t>)>,
    /// Rows whose source is entirely padding.
    pub fully_masked: Vec<bool>,
}

impl<'t> Memory<'t> {
    pub fn batch(&self) -> usize {
        self.fully_masked.len()
    }

    /// Detaches the values from the tape.
    pub fn freeze(&self) -> FrozenMemory {
        let t = |v: Var<'_>| (*v.value()).clone();
        FrozenMemory {
            states: t(self.states),
            values: t(self.values),
            key_bias: t(self.key_bias),
            init: self.init.iter().map(|&(h, c)| (t(h), t(c))).collect(),
            fully_masked: self.fully_masked.clone(),
        }
    }
}

/// Tape-independent copy of a [`Memory`], used to run many decoder steps
/// against one encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenMemory {
    pub states: Tensor,
    pub values: Tensor,
    pub key_bias: Tensor,
    pub init: Vec<(Tensor, Tensor)>,
    pub fully_masked: Vec<bool>,
}

impl FrozenMemory {
    pub fn batch(&self) -> usize {
        self.fully_masked.len()
    }

    pub fn attach<'t>(&self, tape: &'t Tape) -> Memory<'t> {
        let c = |t: &Tensor| tape.constant(t.clone());
        Memory {
            states: c(&self.states),
            values: c(&self.values),
            key_bias: c(&self.key_bias),
            init: self.init.iter().map(|(h, cell)| (c(h), c(cell))).collect(),
            fully_masked: self.fully_masked.clone(),
        }
    }

    /// Batch rows `rows` (repeats allowed), e.g. to replicate one source
    /// across beam hypotheses.
    pub fn select(&self, rows: &[usize]) -> FrozenMemory {
        let pick = |t: &Tensor| layers::select_rows(t, rows);
        FrozenMemory {
            states: pick(&self.states),
            values: pick(&self.values),
            key_bias: pick(&self.key_bias),
            init: self.init.iter().map(|(h, c)| (pick(h), pick(c))).collect(),
            fully_masked: rows.iter().map(|&r| self.fully_masked[r]).collect(),
        }
    }
}

/// Decoder state carried between single-token steps, so each step costs
/// one position instead of the whole prefix.
#[derive(Debug, Clone)]
pub struct DecoderCache {
    state: CacheState,
    steps: usize,
    batch: usize,
}

#[derive(Debug, Clone)]
enum CacheState {
    /// `(h, c)` per decoder layer.
    Recurrent(Vec<(Tensor, Tensor)>),
    /// Last `kernel_width` inputs per decoder layer.
    Conv(Vec<Tensor>),
    Transformer(transformer::Cache),
}

impl DecoderCache {
    /// Tokens consumed so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Rows `rows` (repeats allowed), e.g. to follow beam reordering.
    pub fn select(&self, rows: &[usize]) -> DecoderCache {
        let pick = |t: &Tensor| layers::select_rows(t, rows);
        let state = match &self.state {
            CacheState::Recurrent(s) => CacheState::Recurrent(s.iter().map(|(h, c)| (pick(h), pick(c))).collect()),
            CacheState::Conv(w) => CacheState::Conv(w.iter().map(pick).collect()),
            CacheState::Transformer(c) => CacheState::Transformer(c.select(rows)),
        };
        DecoderCache {
            state,
            steps: self.steps,
            batch: rows.len(),
        }
    }
}

#[derive(Debug, Clone)]
enum Net {
    Lstm(lstm::LstmNet),
    Conv(conv::ConvNet),
    Transformer(transformer::TransformerNet),
}

/// A parameterized encoder-decoder.
#[derive(Debug, Clone)]
pub struct SeqModel {
    config: ModelConfig,
    src_vocab: usize,
    tgt_vocab: usize,
    params: ParamStore,
    net: Net,
}

/// Builds a model with parameters drawn deterministically from `seed`.
pub fn build_model(config: &ModelConfig, src_vocab: usize, tgt_vocab: usize, seed: u64) -> Result<SeqModel, ModelError> {
    config.validate()?;
    for size in [src_vocab, tgt_vocab] {
        if size < SPECIAL_TOKENS.len() {
            return Err(ModelError::InvalidConfig(format!(
                "vocabulary of {size} cannot hold the special tokens"
            )));
        }
    }
    let mut params = ParamStore::new();
    let mut init = layers::Init {
        store: &mut params,
        rng: RngState::new(seed).fork("init"),
    };
    let net = match config {
        ModelConfig::Lstm(c) => Net::Lstm(lstm::LstmNet::new(&mut init, c, src_vocab, tgt_vocab)),
        ModelConfig::Conv(c) => Net::Conv(conv::ConvNet::new(&mut init, c, src_vocab, tgt_vocab)),
        ModelConfig::Transformer(c) => Net::Transformer(transformer::TransformerNet::new(&mut init, c, src_vocab, tgt_vocab)),
    };
    Ok(SeqModel {
        config: config.clone(),
        src_vocab,
        tgt_vocab,
        params,
        net,
    })
}

impl SeqModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn arch(&self) -> Arch {
        self.config.arch()
    }

    pub fn src_vocab_size(&self) -> usize {
        self.src_vocab
    }

    pub fn tgt_vocab_size(&self) -> usize {
        self.tgt_vocab
    }

    /// Longest sequence the position tables cover, if bounded.
    pub fn max_positions(&self) -> Option<usize> {
        match &self.config {
            ModelConfig::Lstm(_) => None,
            ModelConfig::Conv(c) => Some(c.max_positions),
            ModelConfig::Transformer(c) => Some(c.max_positions),
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Changes the dropout rate used by training forward passes.
    pub fn set_dropout(&mut self, p: f64) {
        self.config.set_dropout(p);
        match &mut self.net {
            Net::Lstm(n) => n.set_dropout(p),
            Net::Conv(n) => n.set_dropout(p),
            Net::Transformer(n) => n.set_dropout(p),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn encode<'t>(&self, ctx: &Ctx<'t>, src: &IdBatch) -> Result<Memory<'t>, ModelError> {
        src.check(self.src_vocab)?;
        match &self.net {
            Net::Lstm(n) => n.encode(ctx, src),
            Net::Conv(n) => n.encode(ctx, src),
            Net::Transformer(n) => n.encode(ctx, src),
        }
    }

    fn hidden<'t>(&self, ctx: &Ctx<'t>, memory: &Memory<'t>, prefix: &IdBatch) -> Result<Var<'t>, ModelError> {
        prefix.check(self.tgt_vocab)?;
        if prefix.batch() != memory.batch() {
            return Err(ModelError::Batch(format!(
                "prefix batch {} vs memory batch {}",
                prefix.batch(),
                memory.batch()
            )));
        }
        match &self.net {
            Net::Lstm(n) => n.decode_hidden(ctx, memory, prefix),
            Net::Conv(n) => n.decode_hidden(ctx, memory, prefix),
            Net::Transformer(n) => n.decode_hidden(ctx, memory, prefix),
        }
    }

    fn project<'t>(&self, ctx: &Ctx<'t>, hidden: Var<'t>) -> Result<Var<'t>, ModelError> {
        let out = match &self.net {
            Net::Lstm(n) => n.output,
            Net::Conv(n) => n.output,
            Net::Transformer(n) => n.output,
        };
        out.apply(ctx, hidden)
    }

    /// Teacher-forced logits `[B,T,|V_tgt|]` for every prefix position.
    pub fn decode<'t>(&self, ctx: &Ctx<'t>, memory: &Memory<'t>, prefix: &IdBatch) -> Result<Var<'t>, ModelError> {
        let h = self.hidden(ctx, memory, prefix)?;
        self.project(ctx, h)
    }

    /// Logits `[B,|V_tgt|]` for the next token after the whole prefix.
    pub fn decode_last<'t>(&self, ctx: &Ctx<'t>, memory: &Memory<'t>, prefix: &IdBatch) -> Result<Var<'t>, ModelError> {
        let h = self.hidden(ctx, memory, prefix)?;
        let (b, t) = (prefix.batch(), prefix.len());
        let last = h.slice(1, t - 1, t)?;
        let width = last.shape()[2];
        self.project(ctx, last.reshape(&[b, width])?)
    }

    /// Empty decoder state for `memory`.
    pub fn start_decoding(&self, memory: &FrozenMemory) -> Result<DecoderCache, ModelError> {
        let tape = Tape::inference();
        let ctx = Ctx::eval(&tape, &self.params);
        let mem = memory.attach(&tape);
        let b = memory.batch();
        let state = match &self.net {
            Net::Lstm(_) => CacheState::Recurrent(memory.init.clone()),
            Net::Conv(n) => CacheState::Conv(n.empty_windows(b)),
            Net::Transformer(n) => CacheState::Transformer(n.start_cache(&ctx, &mem)?),
        };
        Ok(DecoderCache {
            state,
            steps: 0,
            batch: b,
        })
    }

    /// Feeds one token per row and returns next-token log-probabilities
    /// `[B,|V_tgt|]`. Matches [`Self::decode_last`] on the full prefix up
    /// to rounding.
    pub fn decode_step(&self, memory: &FrozenMemory, cache: &mut DecoderCache, tokens: &[u32]) -> Result<Tensor, ModelError> {
        let b = tokens.len();
        if b != cache.batch || b != memory.batch() {
            return Err(ModelError::Batch(format!(
                "{b} tokens for cache batch {} and memory batch {}",
                cache.batch,
                memory.batch()
            )));
        }
        let ids = IdBatch::new(tokens.to_vec(), b, 1)?;
        ids.check(self.tgt_vocab)?;
        let tape = Tape::inference();
        let ctx = Ctx::eval(&tape, &self.params);
        let mem = memory.attach(&tape);
        let pos = cache.steps;
        let hidden = match (&self.net, &mut cache.state) {
            (Net::Lstm(n), CacheState::Recurrent(s)) => n.step(&ctx, &mem, s, &ids)?,
            (Net::Conv(n), CacheState::Conv(w)) => n.step(&ctx, &mem, w, &ids, pos)?,
            (Net::Transformer(n), CacheState::Transformer(c)) => n.step(&ctx, &mem, c, &ids, pos)?,
            _ => return Err(ModelError::Batch("decoder cache belongs to another architecture".into())),
        };
        cache.steps += 1;
        let width = hidden.shape()[2];
        let logits = self.project(&ctx, hidden.reshape(&[b, width])?)?;
        Ok((*logits.log_softmax(1)?.value()).clone())
    }

    /// Recurrent encoder states before any bidirectional projection:
    /// `[B,S,H]`, or `[B,S,2H]` for a BiLSTM. `None` for other
    /// architectures.
    pub fn recurrent_states<'t>(&self, ctx: &Ctx<'t>, src: &IdBatch) -> Result<Option<Var<'t>>, ModelError> {
        src.check(self.src_vocab)?;
        match &self.net {
            Net::Lstm(n) => Ok(Some(n.raw_encode(ctx, src)?.0)),
            _ => Ok(None),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, src: &IdBatch, prefix: &IdBatch) -> Result<Var<'t>, ModelError> {
        let memory = self.encode(ctx, src)?;
        self.decode(ctx, &memory, prefix)
    }
}

/// Mean over non-pad positions of
/// `(1−ε)·(−log p[target]) + ε·mean_v(−log p[v])`.
pub fn label_smoothed_loss<'t>(logits: Var<'t>, targets: &[u32], pad: u32, epsilon: f64) -> Result<Var<'t>, ModelError> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(ModelError::InvalidConfig(format!("epsilon {epsilon} outside [0, 1)")));
    }
    let shape = logits.shape();
    let vocab = *shape.last().unwrap_or(&1);
    if shape.len() < 2 || targets.len() * vocab != logits.value().numel() {
        return Err(ModelError::Batch(format!("{} targets for logits {shape:?}", targets.len())));
    }
    let count = targets.iter().filter(|&&t| t != pad).count();
    if count == 0 {
        return Err(ModelError::AllPad);
    }
    let positions = &shape[..shape.len() - 1];
    let keep = Tensor::from_fn(positions, |i| if targets[i] == pad { 0.0 } else { 1.0 });
    // Pad positions gather id 0 and are masked out below.
    let ids: Vec<usize> = targets.iter().map(|&t| if t == pad { 0 } else { t as usize }).collect();
    let lp = logits.log_softmax(shape.len() - 1)?;
    let nll = lp.gather_last(&ids)?.scale(-(1.0 - epsilon));
    let per_position = if epsilon > 0.0 {
        let smooth = lp.sum_axis(shape.len() - 1)?.scale(-epsilon / vocab as f64);
        nll.add(smooth)?
    } else {
        nll
    };
    let masked = per_position.mul(logits.tape().constant(keep))?;
    Ok(masked.sum().scale(1.0 / count as f64))
}

/// Closed-form parameter count of a transformer with untied embeddings.
pub fn transformer_param_count(c: &TransformerConfig, src_vocab: usize, tgt_vocab: usize) -> usize {
    let d = c.d_model;
    let attention = 4 * (d * d + d);
    let ffn = d * c.d_ffn + c.d_ffn + c.d_ffn * d + d;
    let norm = 2 * d;
    let encoder = c.enc_layers * (attention + ffn + 2 * norm) + norm;
    let decoder = c.dec_layers * (2 * attention + ffn + 3 * norm) + norm;
    let embeddings = (src_vocab + tgt_vocab) * d;
    let output = d * tgt_vocab + tgt_vocab;
    encoder + decoder + embeddings + output
}

#[cfg(test)]
mod tests;
