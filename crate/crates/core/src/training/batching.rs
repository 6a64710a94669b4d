use super::{BatchSpec, TrainError};
use crate::autodiff::{derive_seed, RngState};
use crate::models::{IdBatch, ModelError};
use crate::subword::{BOS, EOS, PAD};

/// A binarized sentence pair; both sides end in EOS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
}

impl EncodedPair {
    pub fn new(source: Vec<u32>, target: Vec<u32>) -> Self {
        Self { source, target }
    }
}

/// Pair indices grouped into batches, plus how many pairs did not fit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub batches: Vec<Vec<usize>>,
    pub skipped: usize,
}

impl BatchPlan {
    /// Pairs sorted stably by source length, then packed greedily.
    pub fn new(pairs: &[EncodedPair], spec: BatchSpec) -> Result<Self, TrainError> {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.sort_by_key(|&i| pairs[i].source.len());
        match spec {
            BatchSpec::Sentences(0) | BatchSpec::MaxTokens(0) => {
                Err(TrainError::InvalidConfig("batch budget must be positive".into()))
            }
            BatchSpec::Sentences(n) => Ok(Self {
                batches: order.chunks(n).map(<[usize]>::to_vec).collect(),
                skipped: 0,
            }),
            BatchSpec::MaxTokens(budget) => {
                let mut batches = Vec::new();
                let mut skipped = 0;
                let mut current: Vec<usize> = Vec::new();
                let (mut src_w, mut tgt_w) = (0, 0);
                for i in order {
                    let (s, t) = (pairs[i].source.len(), pairs[i].target.len());
                    if s > budget || t > budget {
                        skipped += 1;
                        continue;
                    }
                    let (ns, nt) = (src_w.max(s), tgt_w.max(t));
                    let rows = current.len() + 1;
                    if !current.is_empty() && (ns * rows > budget || nt * rows > budget) {
                        batches.push(std::mem::take(&mut current));
                        src_w = s;
                        tgt_w = t;
                    } else {
                        src_w = ns;
                        tgt_w = nt;
                    }
                    current.push(i);
                }
                if !current.is_empty() {
                    batches.push(current);
                }
                if skipped > 0 {
                    log::warn!("skipped {skipped} pairs longer than max_tokens {budget}");
                }
                Ok(Self { batches, skipped })
            }
        }
    }

    /// Batch order for one epoch, shuffled under `(seed, epoch)`.
    pub fn epoch_order(&self, seed: u64, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.batches.len()).collect();
        RngState::new(derive_seed(seed, &format!("batches.{epoch}"))).shuffle(&mut order);
        order
    }
}

/// Packs and shuffles batches in one call.
pub fn make_batches(pairs: &[EncodedPair], spec: BatchSpec, seed: u64) -> Result<BatchPlan, TrainError> {
    let plan = BatchPlan::new(pairs, spec)?;
    let batches = plan.epoch_order(seed, 0).into_iter().map(|b| plan.batches[b].clone()).collect();
    Ok(BatchPlan {
        batches,
        skipped: plan.skipped,
    })
}

/// Padded model inputs for one batch under teacher forcing.
#[derive(Debug, Clone)]
pub struct Batch {
    pub source: IdBatch,
    /// BOS followed by the target without its final token.
    pub prev_output: IdBatch,
    /// Row-major `[batch, len]` targets, PAD-filled.
    pub target: Vec<u32>,
}

impl Batch {
    pub fn collate(pairs: &[EncodedPair], indices: &[usize]) -> Result<Self, ModelError> {
        let sources: Vec<&[u32]> = indices.iter().map(|&i| pairs[i].source.as_slice()).collect();
        let targets: Vec<&[u32]> = indices.iter().map(|&i| pairs[i].target.as_slice()).collect();
        let width = targets.iter().map(|t| t.len()).max().unwrap_or(0).max(1);
        let mut prev = Vec::with_capacity(targets.len());
        let mut target = Vec::with_capacity(targets.len() * width);
        for t in &targets {
            let mut p = Vec::with_capacity(t.len());
            if !t.is_empty() {
                p.push(BOS);
                p.extend_from_slice(&t[..t.len() - 1]);
            }
            prev.push(p);
            target.extend_from_slice(t);
            target.extend(std::iter::repeat(PAD).take(width - t.len()));
        }
        Ok(Self {
            source: IdBatch::from_rows(&sources)?,
            prev_output: IdBatch::from_rows(&prev)?,
            target,
        })
    }

    /// Non-pad target tokens.
    pub fn target_tokens(&self) -> usize {
        self.target.iter().filter(|&&t| t != PAD).count()
    }
}

/// Drops a trailing EOS.
pub(crate) fn strip_eos(ids: &[u32]) -> &[u32] {
    match ids.split_last() {
        Some((&EOS, rest)) => rest,
        _ => ids,
    }
}
