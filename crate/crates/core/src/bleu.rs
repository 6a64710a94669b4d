//! Sentence-level BLEU and its corpus average.
//!
//! Every sentence is scored on its own with uniform 4-gram weights and the
//! per-sentence scores are averaged arithmetically. This is deliberately not
//! corpus-level BLEU: n-gram counts are never pooled across sentences.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BleuError {
    #[error("reference set is empty")]
    NoReferences,
    #[error("cannot average an empty list of scores")]
    EmptyScores,
    #[error("candidate file has {cand} lines but reference file has {refs}")]
    LineCountMismatch { cand: usize, refs: usize },
    #[error("invalid BLEU config: {0}")]
    InvalidConfig(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// How zero n-gram precisions are treated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Smoothing {
    /// A zero precision at any order makes the sentence score zero.
    None,
    /// Zero numerators are replaced by `epsilon` (diagnostic use only).
    AddEpsilon(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BleuConfig {
    pub max_n: usize,
    pub weights: Vec<f64>,
    pub smoothing: Smoothing,
}

impl Default for BleuConfig {
    fn default() -> Self {
        Self {
            max_n: 4,
            weights: vec![0.25; 4],
            smoothing: Smoothing::None,
        }
    }
}

impl BleuConfig {
    pub fn validate(&self) -> Result<(), BleuError> {
        if self.max_n == 0 {
            return Err(BleuError::InvalidConfig("max_n must be at least 1".into()));
        }
        if self.weights.len() != self.max_n {
            return Err(BleuError::InvalidConfig(format!(
                "{} weights given for max_n = {}",
                self.weights.len(),
                self.max_n
            )));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(BleuError::InvalidConfig(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Clipped match and total candidate n-gram counts for one order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct NgramTally {
    pub matches: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SentenceScore {
    pub score: f64,
    pub tallies: Vec<NgramTally>,
    pub candidate_len: usize,
    pub reference_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    pub per_sentence: Vec<f64>,
    pub counts: Vec<Vec<NgramTally>>,
    pub mean: f64,
}

fn ngram_counts<'a, S: AsRef<str>>(tokens: &'a [S], n: usize) -> HashMap<Vec<&'a str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            let key: Vec<&str> = window.iter().map(|t| t.as_ref()).collect();
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts
}

/// Candidate n-gram counts clipped by their maximum count in any single
/// reference, together with the number of candidate n-grams.
pub fn modified_precision<S: AsRef<str>, R: AsRef<[S]>>(
    candidate: &[S],
    references: &[R],
    n: usize,
) -> NgramTally {
    assert!(n >= 1, "n-gram order must be positive");
    let total = (candidate.len() + 1).saturating_sub(n);
    if total == 0 {
        return NgramTally { matches: 0, total };
    }
    let cand_counts = ngram_counts(candidate, n);
    let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
    for reference in references {
        for (gram, count) in ngram_counts(reference.as_ref(), n) {
            let slot = max_ref.entry(gram).or_insert(0);
            *slot = (*slot).max(count);
        }
    }
    let matches = cand_counts
        .iter()
        .map(|(gram, &count)| count.min(max_ref.get(gram).copied().unwrap_or(0)))
        .sum();
    NgramTally { matches, total }
}

/// Reference length closest to `cand_len`; ties go to the shorter one.
pub fn effective_reference_length<R: AsRef<[S]>, S>(references: &[R], cand_len: usize) -> usize {
    references
        .iter()
        .map(|r| r.as_ref().len())
        .min_by_key(|&len| (len.abs_diff(cand_len), len))
        .unwrap_or(0)
}

pub fn brevity_penalty(cand_len: usize, ref_len: usize) -> f64 {
    if cand_len > ref_len {
        1.0
    } else if cand_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    }
}

/// Scores one tokenized candidate against its references.
pub fn sentence_bleu_detailed<S: AsRef<str>, R: AsRef<[S]>>(
    candidate: &[S],
    references: &[R],
    config: &BleuConfig,
) -> Result<SentenceScore, BleuError> {
    config.validate()?;
    if references.is_empty() {
        return Err(BleuError::NoReferences);
    }
    let tallies: Vec<NgramTally> = (1..=config.max_n)
        .map(|n| modified_precision(candidate, references, n))
        .collect();
    let cand_len = candidate.len();
    let ref_len = effective_reference_length(references, cand_len);
    let score = if cand_len == 0 {
        0.0
    } else {
        combine(&tallies, config, cand_len, ref_len)
    };
    Ok(SentenceScore {
        score,
        tallies,
        candidate_len: cand_len,
        reference_len: ref_len,
    })
}

fn combine(tallies: &[NgramTally], config: &BleuConfig, cand_len: usize, ref_len: usize) -> f64 {
    let mut log_sum = 0.0;
    for (tally, &weight) in tallies.iter().zip(&config.weights) {
        let p = match config.smoothing {
            Smoothing::None => {
                if tally.matches == 0 {
                    return 0.0;
                }
                tally.matches as f64 / tally.total as f64
            }
            Smoothing::AddEpsilon(eps) => {
                if tally.matches == 0 {
                    eps / tally.total.max(1) as f64
                } else {
                    tally.matches as f64 / tally.total as f64
                }
            }
        };
        log_sum += weight * p.ln();
    }
    brevity_penalty(cand_len, ref_len) * log_sum.exp()
}

pub fn sentence_bleu<S: AsRef<str>, R: AsRef<[S]>>(
    candidate: &[S],
    references: &[R],
    config: &BleuConfig,
) -> Result<f64, BleuError> {
    sentence_bleu_detailed(candidate, references, config).map(|s| s.score)
}

/// Arithmetic mean of per-sentence scores.
pub fn corpus_average(scores: &[f64]) -> Result<BleuReport, BleuError> {
    if scores.is_empty() {
        return Err(BleuError::EmptyScores);
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok(BleuReport {
        per_sentence: scores.to_vec(),
        counts: Vec::new(),
        mean,
    })
}

/// Scores parallel lists of whitespace-tokenized surface strings, one
/// reference per candidate.
pub fn score_lines<C: AsRef<str>, R: AsRef<str>>(
    candidates: &[C],
    references: &[R],
    config: &BleuConfig,
) -> Result<BleuReport, BleuError> {
    if candidates.len() != references.len() {
        return Err(BleuError::LineCountMismatch {
            cand: candidates.len(),
            refs: references.len(),
        });
    }
    let mut scores = Vec::with_capacity(candidates.len());
    let mut counts = Vec::with_capacity(candidates.len());
    for (cand, reference) in candidates.iter().zip(references) {
        let cand: Vec<&str> = cand.as_ref().split_whitespace().collect();
        let reference: Vec<&str> = reference.as_ref().split_whitespace().collect();
        let detailed = sentence_bleu_detailed(&cand, &[reference], config)?;
        scores.push(detailed.score);
        counts.push(detailed.tallies);
    }
    let mut report = corpus_average(&scores)?;
    report.counts = counts;
    Ok(report)
}

/// Surface preprocessing applied to both sides before scoring.
pub type LinePreprocessor<'a> = &'a dyn Fn(&str) -> String;

/// Scores a candidate file against a reference file line by line.
pub fn score_files(
    cand_path: &Path,
    ref_path: &Path,
    preprocess: Option<LinePreprocessor<'_>>,
    config: &BleuConfig,
) -> Result<BleuReport, BleuError> {
    let read = |path: &Path| {
        std::fs::read_to_string(path).map_err(|source| BleuError::Io {
            path: path.display().to_string(),
            source,
        })
    };
    let cand_text = read(cand_path)?;
    let ref_text = read(ref_path)?;
    let prep = |line: &str| match preprocess {
        Some(f) => f(line),
        None => line.to_string(),
    };
    let cands: Vec<String> = cand_text.lines().map(prep).collect();
    let refs: Vec<String> = ref_text.lines().map(prep).collect();
    score_lines(&cands, &refs, config)
}

impl BleuReport {
    /// TSV with one `line<TAB>score` row per sentence and a summary row.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("line\tscore\n");
        for (i, score) in self.per_sentence.iter().enumerate() {
            let _ = writeln!(out, "{}\t{:.6}", i + 1, score);
        }
        let _ = writeln!(out, "{}", self.summary_line());
        out
    }

    pub fn summary_line(&self) -> String {
        format!("mean_sentence_bleu\t{:.4}", self.mean)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn clipped_unigram_case() {
        let cand = toks("the the the the the the the");
        let reference = toks("the cat is on the mat");
        let tally = modified_precision(&cand, &[reference], 1);
        assert_eq!(tally, NgramTally { matches: 2, total: 7 });
    }

    #[test]
    fn identical_sentences_score_one() {
        let s = toks("a b c d e");
        let score = sentence_bleu(&s, &[s.clone()], &BleuConfig::default()).unwrap();
        assert_eq!(score, 1.0);
    }

    #[test]
    fn short_candidate_scores_zero() {
        let s = toks("a b c");
        assert_eq!(sentence_bleu(&s, &[s.clone()], &BleuConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn empty_candidate_and_missing_references() {
        let empty: Vec<&str> = Vec::new();
        let r = toks("a b c d");
        assert_eq!(sentence_bleu(&empty, &[r], &BleuConfig::default()).unwrap(), 0.0);
        let none: Vec<Vec<&str>> = Vec::new();
        assert!(matches!(
            sentence_bleu(&toks("a"), &none, &BleuConfig::default()),
            Err(BleuError::NoReferences)
        ));
    }

    #[test]
    fn closest_reference_length_prefers_shorter_on_tie() {
        let refs = vec![toks("a b c d e f"), toks("a b c d")];
        assert_eq!(effective_reference_length(&refs, 5), 4);
    }

    #[test]
    fn brevity_penalty_values() {
        assert_eq!(brevity_penalty(5, 4), 1.0);
        assert_eq!(brevity_penalty(4, 4), 1.0);
        assert!((brevity_penalty(4, 5) - (-0.25f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn average_of_scores() {
        assert_eq!(corpus_average(&[1.0, 0.0]).unwrap().mean, 0.5);
        assert!(corpus_average(&[]).is_err());
    }

    #[test]
    fn line_count_mismatch() {
        let err = score_lines(&["a"], &["a", "b"], &BleuConfig::default()).unwrap_err();
        assert!(matches!(err, BleuError::LineCountMismatch { cand: 1, refs: 2 }));
    }

    #[test]
    fn epsilon_smoothing_keeps_partial_credit() {
        let cfg = BleuConfig {
            smoothing: Smoothing::AddEpsilon(0.1),
            ..BleuConfig::default()
        };
        let score = sentence_bleu(&toks("a b x d"), &[toks("a b c d")], &cfg).unwrap();
        assert!(score > 0.0 && score < 1.0);
    }

    #[test]
    fn summary_formatting() {
        let report = corpus_average(&[0.123456]).unwrap();
        assert_eq!(report.summary_line(), "mean_sentence_bleu\t0.1235");
    }
}
