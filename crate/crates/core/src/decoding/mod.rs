//! Greedy and beam search over any next-token scorer, plus the end-to-end
//! `translate` path.

mod search;
mod translate;

use thiserror::Error;

use crate::autodiff::Tape;
use crate::models::{Ctx, DecoderCache, FrozenMemory, IdBatch, ModelError, SeqModel};
use crate::subword::{SubwordError, BOS, EOS};

pub use search::{beam_search, greedy_search, StepScorer};
pub use translate::{translate, translate_batch, translate_traced};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid decode config: {0}")]
    InvalidConfig(String),
    #[error("{which} vocabulary fingerprint {found} does not match the model's {expected}")]
    Fingerprint {
        which: &'static str,
        expected: String,
        found: String,
    },
    #[error("{which} vocabulary has {found} entries but the model expects {expected}")]
    VocabSize {
        which: &'static str,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Subword(#[from] SubwordError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Cap on generated tokens; `None` means `2·source_len + 10`.
    pub max_len: Option<usize>,
    /// Scores are divided by `length^length_penalty`.
    pub length_penalty: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: 5,
            max_len: None,
            length_penalty: 1.0,
        }
    }
}

impl DecodeConfig {
    pub fn greedy() -> Self {
        Self {
            beam: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.beam == 0 {
            return Err(DecodeError::InvalidConfig("beam must be at least 1".into()));
        }
        if self.max_len == Some(0) {
            return Err(DecodeError::InvalidConfig("max_len must be at least 1".into()));
        }
        if !(self.length_penalty >= 0.0) {
            return Err(DecodeError::InvalidConfig(format!(
                "length penalty {} must be non-negative",
                self.length_penalty
            )));
        }
        Ok(())
    }

    /// `key=value` lines, used for run metadata and provenance hashes.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("decode.beam".into(), self.beam.to_string()),
            (
                "decode.max_len".into(),
                self.max_len.map_or_else(|| "auto".to_string(), |m| m.to_string()),
            ),
            ("decode.length_penalty".into(), self.length_penalty.to_string()),
        ]
    }

    pub fn from_lookup(get: &dyn Fn(&str) -> Option<String>) -> Result<Self, DecodeError> {
        let mut c = Self::default();
        let bad = |k: &str, v: &str| DecodeError::InvalidConfig(format!("bad value {v:?} for {k}"));
        if let Some(v) = get("decode.beam") {
            c.beam = v.trim().parse().map_err(|_| bad("decode.beam", &v))?;
        }
        if let Some(v) = get("decode.max_len") {
            c.max_len = match v.trim() {
                "auto" | "none" | "" => None,
                n => Some(n.parse().map_err(|_| bad("decode.max_len", &v))?),
            };
        }
        if let Some(v) = get("decode.length_penalty") {
            c.length_penalty = v.trim().parse().map_err(|_| bad("decode.length_penalty", &v))?;
        }
        c.validate()?;
        Ok(c)
    }

    /// SHA-256 of the `key=value` form.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let text: String = self.to_pairs().iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn max_len_for(&self, source_len: usize) -> usize {
        self.max_len.unwrap_or(2 * source_len + 10)
    }
}

/// A generated sequence. `ids` excludes BOS and ends in EOS iff finished.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub ids: Vec<u32>,
    pub logprob: f64,
    pub normalized_score: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub(crate) fn new(ids: Vec<u32>, logprob: f64, alpha: f64) -> Self {
        let finished = ids.last() == Some(&EOS);
        let normalized_score = normalize_score(logprob, ids.len(), alpha);
        Self {
            ids,
            logprob,
            normalized_score,
            finished,
        }
    }

    /// Output tokens without the trailing EOS.
    pub fn tokens(&self) -> &[u32] {
        match self.ids.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.ids,
        }
    }
}

pub(crate) fn normalize_score(logprob: f64, len: usize, alpha: f64) -> f64 {
    if len == 0 {
        logprob
    } else {
        logprob / (len as f64).powf(alpha)
    }
}

/// Scores continuations of one encoded source with a frozen model.
///
/// Decoder state is cached between calls: when every prefix extends one
/// of the previous call's prefixes by one token, only that token is run.
/// Anything else replays the prefixes from the start.
pub struct ModelScorer<'m> {
    model: &'m SeqModel,
    memory: FrozenMemory,
    replicated: Option<FrozenMemory>,
    cached: Option<(Vec<Vec<u32>>, DecoderCache)>,
}

impl<'m> ModelScorer<'m> {
    pub fn new(model: &'m SeqModel, source: &[u32]) -> Result<Self, ModelError> {
        let tape = Tape::inference();
        let ctx = Ctx::eval(&tape, model.params());
        let memory = model.encode(&ctx, &IdBatch::from_rows(&[source])?)?.freeze();
        Ok(Self {
            model,
            memory,
            replicated: None,
            cached: None,
        })
    }

    fn memory_for(&mut self, n: usize) -> &FrozenMemory {
        if self.replicated.as_ref().map(|m| m.batch()) != Some(n) {
            self.replicated = Some(self.memory.select(&vec![0; n]));
        }
        self.replicated.as_ref().expect("set above")
    }
}

impl StepScorer for ModelScorer<'_> {
    type Error = ModelError;

    fn vocab_size(&self) -> usize {
        self.model.tgt_vocab_size()
    }

    fn next_log_probs(&mut self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>, ModelError> {
        let n = prefixes.len();
        let len = prefixes.first().map_or(0, Vec::len);
        if len == 0 || prefixes.iter().any(|p| p.len() != len) {
            return Err(ModelError::EmptyPrefix);
        }
        let parents: Option<Vec<usize>> = match &self.cached {
            Some((previous, _)) if len > 1 => prefixes
                .iter()
                .map(|p| previous.iter().position(|q| q.as_slice() == &p[..len - 1]))
                .collect(),
            _ => None,
        };
        let model = self.model;
        let (mut cache, start) = match (parents, self.cached.take()) {
            (Some(rows), Some((_, cache))) => (cache.select(&rows), len - 1),
            _ => (model.start_decoding(self.memory_for(n))?, 0),
        };
        let memory = self.memory_for(n).clone();
        let mut lp = None;
        for pos in start..len {
            let column: Vec<u32> = prefixes.iter().map(|p| p[pos]).collect();
            lp = Some(model.decode_step(&memory, &mut cache, &column)?);
        }
        self.cached = Some((prefixes.to_vec(), cache));
        let lp = lp.expect("at least one step");
        Ok(lp.rows().map(<[f64]>::to_vec).collect())
    }
}

/// Output length cap, clipped to the model's position table.
fn output_limit(model: &SeqModel, config: &DecodeConfig, source_len: usize) -> usize {
    let limit = config.max_len_for(source_len);
    model.max_positions().map_or(limit, |m| limit.min(m))
}

/// Greedy decoding of one source (ids ending in EOS).
pub fn greedy_decode(model: &SeqModel, source: &[u32], config: &DecodeConfig) -> Result<Hypothesis, DecodeError> {
    config.validate()?;
    let mut scorer = ModelScorer::new(model, source)?;
    Ok(greedy_search(&mut scorer, output_limit(model, config, source.len()), config.length_penalty)?)
}

/// Beam search for one source; returns the n-best list, best first.
pub fn beam_decode(model: &SeqModel, source: &[u32], config: &DecodeConfig) -> Result<Vec<Hypothesis>, DecodeError> {
    config.validate()?;
    let mut scorer = ModelScorer::new(model, source)?;
    Ok(beam_search(
        &mut scorer,
        config.beam,
        output_limit(model, config, source.len()),
        config.length_penalty,
    )?)
}

/// Best hypothesis under `config` (greedy when `beam == 1`).
pub fn decode_best(model: &SeqModel, source: &[u32], config: &DecodeConfig) -> Result<Hypothesis, DecodeError> {
    if config.beam == 1 {
        greedy_decode(model, source, config)
    } else {
        Ok(beam_decode(model, source, config)?.remove(0))
    }
}

/// Greedy decoding of many sources at once, `chunk` sentences per batch.
/// Faster than [`greedy_decode`] per sentence; results can differ from it
/// only where source padding shifts a logit tie by rounding.
pub fn greedy_batch(
    model: &SeqModel,
    sources: &[Vec<u32>],
    config: &DecodeConfig,
    chunk: usize,
) -> Result<Vec<Hypothesis>, DecodeError> {
    config.validate()?;
    let mut out = Vec::with_capacity(sources.len());
    for group in sources.chunks(chunk.max(1)) {
        let tape = Tape::inference();
        let ctx = Ctx::eval(&tape, model.params());
        let mut memory = model.encode(&ctx, &IdBatch::from_rows(group)?)?.freeze();
        let mut cache = model.start_decoding(&memory)?;
        let limits: Vec<usize> = group.iter().map(|s| output_limit(model, config, s.len())).collect();
        let mut ids: Vec<Vec<u32>> = vec![Vec::new(); group.len()];
        let mut logprobs = vec![0.0; group.len()];
        // Rows of `group` still decoding, in cache order.
        let mut active: Vec<usize> = (0..group.len()).collect();
        let mut last: Vec<u32> = vec![BOS; group.len()];
        while !active.is_empty() {
            let lp = model.decode_step(&memory, &mut cache, &last)?;
            let mut keep = Vec::with_capacity(active.len());
            let mut next = Vec::with_capacity(active.len());
            for (slot, row) in lp.rows().enumerate() {
                let r = active[slot];
                let (best, score) = search::argmax(row);
                ids[r].push(best);
                logprobs[r] += score;
                if best != EOS && ids[r].len() < limits[r] {
                    keep.push(slot);
                    next.push(best);
                }
            }
            if keep.is_empty() {
                break;
            }
            if keep.len() != active.len() {
                memory = memory.select(&keep);
                cache = cache.select(&keep);
                active = keep.iter().map(|&s| active[s]).collect();
            }
            last = next;
        }
        for (r, ids) in ids.into_iter().enumerate() {
            out.push(Hypothesis::new(ids, logprobs[r], config.length_penalty));
        }
    }
    Ok(out)
}
