use std::cmp::Ordering;

use super::{normalize_score, Hypothesis};
use crate::subword::{BOS, EOS, PAD};

/// Source of next-token log-probabilities for a set of equal-length
/// prefixes, each starting with BOS.
pub trait StepScorer {
    type Error;

    fn vocab_size(&self) -> usize;

    fn next_log_probs(&mut self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>, Self::Error>;
}

fn allowed(token: u32) -> bool {
    token != PAD && token != BOS
}

/// Highest log-probability token other than PAD/BOS; ties go to the lowest
/// id. A row without any finite entry yields EOS.
pub(crate) fn argmax(row: &[f64]) -> (u32, f64) {
    let mut best: Option<(u32, f64)> = None;
    for (id, &lp) in row.iter().enumerate() {
        let id = id as u32;
        if !allowed(id) || lp.is_nan() {
            continue;
        }
        if best.map_or(true, |(_, b)| lp > b) {
            best = Some((id, lp));
        }
    }
    match best {
        Some((id, lp)) if lp > f64::NEG_INFINITY => (id, lp),
        _ => (EOS, row.get(EOS as usize).copied().unwrap_or(f64::NEG_INFINITY)),
    }
}

/// Appends the argmax token until EOS or `max_len` tokens.
pub fn greedy_search<S: StepScorer>(scorer: &mut S, max_len: usize, alpha: f64) -> Result<Hypothesis, S::Error> {
    let mut prefix = vec![BOS];
    let mut logprob = 0.0;
    while prefix.len() <= max_len {
        let rows = scorer.next_log_probs(std::slice::from_ref(&prefix))?;
        let (token, lp) = argmax(&rows[0]);
        prefix.push(token);
        logprob += lp;
        if token == EOS {
            break;
        }
    }
    Ok(Hypothesis::new(prefix.split_off(1), logprob, alpha))
}

struct Candidate {
    total: f64,
    step: f64,
    parent: usize,
    token: u32,
}

fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.total
        .total_cmp(&a.total)
        .then(b.step.total_cmp(&a.step))
        .then(a.parent.cmp(&b.parent))
        .then(a.token.cmp(&b.token))
}

fn by_score(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.normalized_score
        .total_cmp(&a.normalized_score)
        .then(b.logprob.total_cmp(&a.logprob))
        .then(a.ids.cmp(&b.ids))
}

/// Beam search with `beam` live hypotheses.
///
/// Each step ranks the `2·beam` best one-token extensions. An EOS
/// extension finishes a hypothesis only if it ranks within the first
/// `beam`; the first `beam` non-EOS extensions stay live. The search ends
/// once `beam` hypotheses have finished, when no live hypothesis can still
/// beat the best finished one, or at `max_len` tokens, where live
/// hypotheses are returned unfinished. The result is sorted by
/// normalized score, best first.
pub fn beam_search<S: StepScorer>(
    scorer: &mut S,
    beam: usize,
    max_len: usize,
    alpha: f64,
) -> Result<Vec<Hypothesis>, S::Error> {
    let beam = beam.max(1);
    let mut live: Vec<(Vec<u32>, f64)> = vec![(vec![BOS], 0.0)];
    let mut done: Vec<Hypothesis> = Vec::new();
    for step in 0..max_len {
        let prefixes: Vec<Vec<u32>> = live.iter().map(|(p, _)| p.clone()).collect();
        let rows = scorer.next_log_probs(&prefixes)?;
        let mut candidates = Vec::new();
        for (parent, row) in rows.iter().enumerate() {
            for (token, &lp) in row.iter().enumerate() {
                let token = token as u32;
                if allowed(token) && lp > f64::NEG_INFINITY {
                    candidates.push(Candidate {
                        total: live[parent].1 + lp,
                        step: lp,
                        parent,
                        token,
                    });
                }
            }
        }
        let keep = (2 * beam).min(candidates.len());
        if keep < candidates.len() {
            candidates.select_nth_unstable_by(keep, rank);
            candidates.truncate(keep);
        }
        candidates.sort_by(rank);
        let mut next = Vec::with_capacity(beam);
        for (position, cand) in candidates.iter().enumerate() {
            let (prefix, _) = &live[cand.parent];
            if cand.token == EOS {
                if position < beam {
                    let mut ids = prefix[1..].to_vec();
                    ids.push(EOS);
                    done.push(Hypothesis::new(ids, cand.total, alpha));
                }
            } else if next.len() < beam {
                let mut p = prefix.clone();
                p.push(cand.token);
                next.push((p, cand.total));
            }
        }
        live = next;
        if done.len() >= beam || live.is_empty() {
            break;
        }
        if step + 1 == max_len {
            break;
        }
        if let Some(best) = done.iter().map(|h| h.normalized_score).reduce(f64::max) {
            // A live hypothesis can only lose log-probability, and its
            // length-normalized score is bounded by dividing by max_len.
            let bound = live
                .iter()
                .map(|(_, lp)| normalize_score(*lp, max_len, alpha))
                .fold(f64::NEG_INFINITY, f64::max);
            if best >= bound {
                live.clear();
                break;
            }
        }
    }
    if done.len() < beam {
        for (prefix, lp) in live {
            done.push(Hypothesis::new(prefix[1..].to_vec(), lp, alpha));
        }
    }
    done.sort_by(by_score);
    Ok(done)
}
