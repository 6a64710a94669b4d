//! Pseudo-parallel data from monolingual text and a reverse-direction model.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::autodiff::{derive_seed, RngState};
use crate::corpus::{read_lines, CorpusError, LanguageTag, MonolingualCorpus, ParallelCorpus, SentencePair};
use crate::decoding::{translate_batch, DecodeConfig, DecodeError};
use crate::models::{build_model, ModelConfig, ModelError};
use crate::pipeline::{PipelineOptions, TextPipeline};
use crate::training::{train, Checkpoint, CheckpointError, DevSurface, TrainConfig, TrainError, TrainOptions, TrainReport};

#[derive(Debug, Error)]
pub enum BtError {
    #[error("monolingual corpus is {found} but the model translates from {expected}")]
    LanguageMismatch { expected: LanguageTag, found: LanguageTag },
    #[error("invalid option: {0}")]
    InvalidOption(String),
    #[error("malformed provenance line {line}: {reason}")]
    Provenance { line: usize, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

fn io_err(path: &Path, source: std::io::Error) -> BtError {
    BtError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Which side of a pseudo pair is machine-generated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum BtDirection {
    /// Authentic target, translated source: the usual back-translation.
    #[default]
    SyntheticSource,
    /// Authentic source, translated target (forward translation).
    SyntheticTarget,
}

impl BtDirection {
    pub fn name(self) -> &'static str {
        match self {
            BtDirection::SyntheticSource => "synthetic-source",
            BtDirection::SyntheticTarget => "synthetic-target",
        }
    }
}

impl std::str::FromStr for BtDirection {
    type Err = BtError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "synthetic-source" => Ok(BtDirection::SyntheticSource),
            "synthetic-target" => Ok(BtDirection::SyntheticTarget),
            _ => Err(BtError::InvalidOption(format!("unknown direction {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BtOptions {
    pub decode: DecodeConfig,
    pub direction: BtDirection,
    /// Keep only pairs whose synthetic/authentic token ratio lies in
    /// `[lo, hi]`. Off by default.
    pub length_ratio: Option<(f64, f64)>,
}

impl Default for BtOptions {
    fn default() -> Self {
        Self {
            decode: DecodeConfig::greedy(),
            direction: BtDirection::SyntheticSource,
            length_ratio: None,
        }
    }
}

/// Where one pseudo pair came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    /// Zero-based index into the monolingual corpus.
    pub line: usize,
    pub checkpoint: String,
    pub decode_config: String,
}

/// A corpus of synthetic pairs plus one provenance record per pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoParallelCorpus {
    pub corpus: ParallelCorpus,
    pub provenance: Vec<Provenance>,
    pub dropped_empty: usize,
    pub dropped_ratio: usize,
}

impl PseudoParallelCorpus {
    pub fn len(&self) -> usize {
        self.corpus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.corpus.is_empty()
    }

    /// `<prefix>.src`, `<prefix>.tgt` and the `<prefix>.prov` sidecar.
    pub fn paths(prefix: &Path) -> [PathBuf; 3] {
        let with = |ext: &str| {
            let mut p = prefix.as_os_str().to_owned();
            p.push(format!(".{ext}"));
            PathBuf::from(p)
        };
        [with("src"), with("tgt"), with("prov")]
    }

    pub fn save(&self, prefix: &Path) -> Result<(), BtError> {
        let [src, tgt, prov] = Self::paths(prefix);
        self.corpus.write(&src, &tgt)?;
        let mut sidecar = String::new();
        for p in &self.provenance {
            let _ = writeln!(sidecar, "{}\t{}\t{}", p.line, p.checkpoint, p.decode_config);
        }
        fs::write(&prov, sidecar).map_err(|e| io_err(&prov, e))
    }

    pub fn load(prefix: &Path, src_lang: LanguageTag, tgt_lang: LanguageTag) -> Result<Self, BtError> {
        let [src, tgt, prov] = Self::paths(prefix);
        let (sources, targets) = (read_lines(&src)?, read_lines(&tgt)?);
        if sources.len() != targets.len() {
            return Err(CorpusError::LineCountMismatch {
                src: sources.len(),
                tgt: targets.len(),
            }
            .into());
        }
        let pairs = sources
            .into_iter()
            .zip(targets)
            .map(|(s, t)| SentencePair::synthetic(s, t))
            .collect::<Result<Vec<_>, _>>()?;
        let text = fs::read_to_string(&prov).map_err(|e| io_err(&prov, e))?;
        let provenance = text
            .lines()
            .enumerate()
            .map(|(i, l)| parse_provenance(i + 1, l))
            .collect::<Result<Vec<_>, _>>()?;
        if provenance.len() != pairs.len() {
            return Err(BtError::Provenance {
                line: provenance.len(),
                reason: format!("{} records for {} pairs", provenance.len(), pairs.len()),
            });
        }
        Ok(Self {
            corpus: ParallelCorpus {
                pairs,
                src_lang,
                tgt_lang,
            },
            provenance,
            dropped_empty: 0,
            dropped_ratio: 0,
        })
    }
}

fn parse_provenance(line: usize, text: &str) -> Result<Provenance, BtError> {
    let bad = |reason: &str| BtError::Provenance {
        line,
        reason: reason.into(),
    };
    let fields: Vec<&str> = text.split('\t').collect();
    let [index, checkpoint, decode_config] = fields[..] else {
        return Err(bad("expected three tab-separated fields"));
    };
    Ok(Provenance {
        line: index.parse().map_err(|_| bad("line index is not a number"))?,
        checkpoint: checkpoint.into(),
        decode_config: decode_config.into(),
    })
}

/// Translates every monolingual line with `model` and pairs it with the
/// untouched input. `pipeline` must translate from the monolingual
/// language, and `checkpoint` must hold vocabularies matching it.
pub fn generate_pseudo_parallel(
    checkpoint: &Checkpoint,
    mono: &MonolingualCorpus,
    pipeline: &TextPipeline,
    options: &BtOptions,
) -> Result<PseudoParallelCorpus, BtError> {
    if mono.lang != pipeline.source.lang {
        return Err(BtError::LanguageMismatch {
            expected: pipeline.source.lang.clone(),
            found: mono.lang.clone(),
        });
    }
    if let Some((lo, hi)) = options.length_ratio {
        if !(lo > 0.0 && lo <= hi) {
            return Err(BtError::InvalidOption(format!("length ratio bounds ({lo}, {hi})")));
        }
    }
    checkpoint.check_vocabs(&pipeline.src_vocab, &pipeline.tgt_vocab)?;
    let model = checkpoint.to_model()?;
    let checkpoint_hash = checkpoint.fingerprint()?;
    let decode_hash = options.decode.fingerprint();

    let outputs = translate_batch(&model, &mono.sentences, pipeline, &options.decode)?;
    let other = pipeline.target.lang.clone();
    let (src_lang, tgt_lang) = match options.direction {
        BtDirection::SyntheticSource => (other, mono.lang.clone()),
        BtDirection::SyntheticTarget => (mono.lang.clone(), other),
    };
    let mut corpus = ParallelCorpus::new(src_lang, tgt_lang);
    let mut provenance = Vec::new();
    let (mut dropped_empty, mut dropped_ratio) = (0, 0);
    for (line, (authentic, synthetic)) in mono.sentences.iter().zip(outputs).enumerate() {
        if synthetic.trim().is_empty() {
            dropped_empty += 1;
            continue;
        }
        if let Some((lo, hi)) = options.length_ratio {
            let ratio = synthetic.split_whitespace().count() as f64 / authentic.split_whitespace().count().max(1) as f64;
            if !(lo..=hi).contains(&ratio) {
                dropped_ratio += 1;
                continue;
            }
        }
        let pair = match options.direction {
            BtDirection::SyntheticSource => SentencePair::synthetic(synthetic, authentic.clone()),
            BtDirection::SyntheticTarget => SentencePair::synthetic(authentic.clone(), synthetic),
        }?;
        corpus.pairs.push(pair);
        provenance.push(Provenance {
            line,
            checkpoint: checkpoint_hash.clone(),
            decode_config: decode_hash.clone(),
        });
    }
    if dropped_empty > 0 {
        log::warn!("dropped {dropped_empty} empty translations");
    }
    Ok(PseudoParallelCorpus {
        corpus,
        provenance,
        dropped_empty,
        dropped_ratio,
    })
}

/// `upsample_real` copies of `real` followed by `pseudo`, shuffled under
/// `seed`.
pub fn mix(
    real: &ParallelCorpus,
    pseudo: &ParallelCorpus,
    upsample_real: usize,
    seed: u64,
) -> Result<ParallelCorpus, BtError> {
    if real.src_lang != pseudo.src_lang {
        return Err(CorpusError::TagMismatch(real.src_lang.clone(), pseudo.src_lang.clone()).into());
    }
    if real.tgt_lang != pseudo.tgt_lang {
        return Err(CorpusError::TagMismatch(real.tgt_lang.clone(), pseudo.tgt_lang.clone()).into());
    }
    let mut pairs = Vec::with_capacity(upsample_real * real.len() + pseudo.len());
    for _ in 0..upsample_real {
        pairs.extend(real.pairs.iter().cloned());
    }
    pairs.extend(pseudo.pairs.iter().cloned());
    RngState::new(derive_seed(seed, "mix")).shuffle(&mut pairs);
    Ok(ParallelCorpus {
        pairs,
        src_lang: real.src_lang.clone(),
        tgt_lang: real.tgt_lang.clone(),
    })
}

/// Everything a back-translation comparison needs besides data.
#[derive(Debug, Clone, PartialEq)]
pub struct BtExperiment {
    pub pipeline: PipelineOptions,
    pub model: ModelConfig,
    pub forward: TrainConfig,
    pub reverse: TrainConfig,
    pub bt: BtOptions,
    pub upsample_real: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct BtOutcome {
    pub reverse: TrainReport,
    pub baseline: TrainReport,
    pub augmented: TrainReport,
    pub pseudo: PseudoParallelCorpus,
}

impl BtOutcome {
    pub fn baseline_bleu(&self) -> f64 {
        self.baseline.best().map_or(0.0, |r| r.dev_bleu)
    }

    pub fn augmented_bleu(&self) -> f64 {
        self.augmented.best().map_or(0.0, |r| r.dev_bleu)
    }
}

/// Trains a reverse model on swapped `real`, back-translates `mono`, then
/// trains forward models on `real` alone and on the mix and scores both
/// on `dev`. With `run_dir` each step writes under its own subdirectory
/// and `pseudo.*` holds the generated corpus.
pub fn bt_experiment(
    experiment: &BtExperiment,
    real: &ParallelCorpus,
    dev: &ParallelCorpus,
    mono: &MonolingualCorpus,
    run_dir: Option<&Path>,
) -> Result<BtOutcome, BtError> {
    if experiment.upsample_real == 0 {
        return Err(BtError::InvalidOption("upsample_real must be at least 1".into()));
    }
    if mono.lang != real.tgt_lang {
        return Err(BtError::LanguageMismatch {
            expected: real.tgt_lang.clone(),
            found: mono.lang.clone(),
        });
    }
    let forward_pipeline = TextPipeline::learn(real, &experiment.pipeline);
    let reverse_pipeline = forward_pipeline.reversed();
    let sub = |name: &str| run_dir.map(|d| d.join(name));

    let reverse = run_training(
        &reverse_pipeline,
        &experiment.model,
        &experiment.reverse,
        &real.swapped(),
        &dev.swapped(),
        derive_seed(experiment.seed, "model.reverse"),
        sub("reverse"),
    )?;
    let pseudo = generate_pseudo_parallel(&reverse.0, mono, &reverse_pipeline, &experiment.bt)?;
    if let Some(dir) = run_dir {
        pseudo.save(&dir.join("pseudo"))?;
    }
    let mixed = mix(real, &pseudo.corpus, experiment.upsample_real, experiment.seed)?;
    let forward_seed = derive_seed(experiment.seed, "model.forward");
    let baseline = run_training(
        &forward_pipeline,
        &experiment.model,
        &experiment.forward,
        real,
        dev,
        forward_seed,
        sub("baseline"),
    )?;
    let augmented = run_training(
        &forward_pipeline,
        &experiment.model,
        &experiment.forward,
        &mixed,
        dev,
        forward_seed,
        sub("augmented"),
    )?;
    if let Some(dir) = run_dir {
        let summary = format!(
            "system\tbest_epoch\tdev_bleu\ttrain_pairs\nbaseline\t{}\t{:.4}\t{}\naugmented\t{}\t{:.4}\t{}\n",
            baseline.1.best_epoch,
            baseline.1.best().map_or(0.0, |r| r.dev_bleu),
            real.len(),
            augmented.1.best_epoch,
            augmented.1.best().map_or(0.0, |r| r.dev_bleu),
            mixed.len(),
        );
        let path = dir.join("comparison.tsv");
        fs::write(&path, summary).map_err(|e| io_err(&path, e))?;
    }
    Ok(BtOutcome {
        reverse: reverse.1,
        baseline: baseline.1,
        augmented: augmented.1,
        pseudo,
    })
}

fn run_training(
    pipeline: &TextPipeline,
    model_config: &ModelConfig,
    config: &TrainConfig,
    train_set: &ParallelCorpus,
    dev: &ParallelCorpus,
    model_seed: u64,
    run_dir: Option<PathBuf>,
) -> Result<(Checkpoint, TrainReport), BtError> {
    let mut model = build_model(model_config, pipeline.src_vocab.len(), pipeline.tgt_vocab.len(), model_seed)?;
    let options = TrainOptions {
        run_dir,
        fingerprints: pipeline.fingerprints(),
        surface: Some(DevSurface::Text(&pipeline.tgt_vocab)),
        resume: false,
    };
    let outcome = train(
        &mut model,
        &pipeline.encode_corpus(train_set),
        &pipeline.encode_corpus(dev),
        config,
        &options,
    )?;
    Ok((outcome.best, outcome.report))
}
