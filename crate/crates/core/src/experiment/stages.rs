use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{file_hash, BoxError, ExperimentConfig, ExperimentError, RunLog};
use crate::backtranslation::{generate_pseudo_parallel, mix};
use crate::bleu::{score_lines, BleuConfig};
use crate::corpus::{load_monolingual, load_parallel, read_lines, write_lines, ParallelCorpus};
use crate::decoding::translate_batch;
use crate::models::build_model;
use crate::pipeline::{Side, TextPipeline};
use crate::subword::{apply_bpe, build_vocab, encode, learn_bpe, read_ids, write_ids, BpeModel, Vocabulary};
use crate::textnorm::TokenizedSentence;
use crate::training::{train, Checkpoint, DevSurface, EncodedPair, TrainConfig, TrainOptions};

const SPLITS: [&str; 3] = ["train", "dev", "test"];

fn stage_err<E: Into<BoxError>>(stage: &'static str) -> impl FnOnce(E) -> ExperimentError {
    move |e| ExperimentError::Stage {
        stage,
        source: e.into(),
    }
}

trait AtStage<T> {
    fn at(self, stage: &'static str) -> Result<T, ExperimentError>;
}

impl<T, E: Into<BoxError>> AtStage<T> for Result<T, E> {
    fn at(self, stage: &'static str) -> Result<T, ExperimentError> {
        self.map_err(stage_err(stage))
    }
}

pub(super) struct Runner<'a> {
    config: &'a ExperimentConfig,
    dir: &'a Path,
    log: &'a mut RunLog,
    pub executed: Vec<&'static str>,
    pub skipped: Vec<&'static str>,
    /// (relative path, hash) of every stamped output.
    outputs: Vec<(String, String)>,
}

impl<'a> Runner<'a> {
    pub fn new(config: &'a ExperimentConfig, dir: &'a Path, log: &'a mut RunLog) -> Self {
        Self {
            config,
            dir,
            log,
            executed: Vec::new(),
            skipped: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    /// Runs `work` unless the stamp of `name` records the same inputs and
    /// outputs that still hash the same. `work_dir` is cleared before a
    /// rerun caused by changed inputs but kept after an interruption.
    fn stage(
        &mut self,
        name: &'static str,
        params: &str,
        inputs: &[PathBuf],
        outputs: &[&str],
        work_dir: Option<&str>,
        work: impl FnOnce(&mut Self) -> Result<(), ExperimentError>,
    ) -> Result<(), ExperimentError> {
        let mut hasher = Sha256::new();
        hasher.update(name.as_bytes());
        hasher.update(params.as_bytes());
        for input in inputs {
            hasher.update(input.display().to_string().as_bytes());
            hasher.update(file_hash(input).map_err(stage_err(name))?.as_bytes());
        }
        let input_hash = hex::encode(hasher.finalize());
        let stamp_path = self.path(&format!("stages/{name}.stamp"));
        let stamp = fs::read_to_string(&stamp_path).ok();
        if let Some(stamp) = &stamp {
            if let Some(hashes) = fresh(stamp, &input_hash, self.dir, outputs) {
                self.log.line(&format!("stage {name}: fresh"));
                self.skipped.push(name);
                self.outputs.extend(hashes);
                return Ok(());
            }
            if let Some(dir) = work_dir {
                let _ = fs::remove_dir_all(self.path(dir));
            }
        }
        self.log.line(&format!("stage {name}: running"));
        work(self)?;
        let mut text = format!("input\t{input_hash}\n");
        for rel in outputs {
            let hash = file_hash(&self.path(rel)).map_err(stage_err(name))?;
            let _ = writeln!(text, "output\t{rel}\t{hash}");
            self.outputs.push((rel.to_string(), hash));
        }
        fs::create_dir_all(self.path("stages")).map_err(|e| ExperimentError::io(self.dir, e))?;
        let tmp = stamp_path.with_extension("tmp");
        fs::write(&tmp, text).map_err(|e| ExperimentError::io(&tmp, e))?;
        fs::rename(&tmp, &stamp_path).map_err(|e| ExperimentError::io(&stamp_path, e))?;
        self.executed.push(name);
        Ok(())
    }

    pub fn run_all(&mut self) -> Result<f64, ExperimentError> {
        let c = self.config;
        let (src_side, tgt_side) = c.sides();
        let side_params = format!("{:?}{:?}", src_side, tgt_side);

        // prep: normalize, pre-tokenize, transliterate.
        let raw: Vec<PathBuf> = [&c.train, &c.dev, &c.test]
            .iter()
            .flat_map(|s| [s.src.clone(), s.tgt.clone()])
            .collect();
        let prep_outputs: Vec<String> = SPLITS
            .iter()
            .flat_map(|s| [format!("data/{s}.src.prep"), format!("data/{s}.tgt.prep")])
            .chain(["data/test.src.raw".to_string(), "data/test.ref".to_string()])
            .collect();
        self.stage("prep", &side_params, &raw, &refs(&prep_outputs), None, |r| {
            for (split, paths) in SPLITS.iter().zip([&c.train, &c.dev, &c.test]) {
                let (corpus, _) =
                    load_parallel(&paths.src, &paths.tgt, c.src_lang.clone(), c.tgt_lang.clone()).at("prep")?;
                let prep = |side: &Side, texts: Vec<&str>| -> Vec<String> {
                    texts.into_iter().map(|t| side.prepare(t, &mut Vec::new())).collect()
                };
                write_lines(&r.path(&format!("data/{split}.src.prep")), &prep(&src_side, corpus.sources())).at("prep")?;
                write_lines(&r.path(&format!("data/{split}.tgt.prep")), &prep(&tgt_side, corpus.targets())).at("prep")?;
                if *split == "test" {
                    write_lines(&r.path("data/test.src.raw"), &corpus.sources()).at("prep")?;
                    let refs: Vec<String> = corpus.targets().iter().map(|t| tgt_side.surface(t)).collect();
                    write_lines(&r.path("data/test.ref"), &refs).at("prep")?;
                }
            }
            Ok(())
        })?;

        // bpe: joint merges over both prepared training sides, then applied everywhere.
        let prepped: Vec<PathBuf> = prep_outputs[..6].iter().map(|p| self.path(p)).collect();
        let bpe_outputs: Vec<String> = std::iter::once("bpe/codes".to_string())
            .chain(SPLITS.iter().flat_map(|s| [format!("data/{s}.src.bpe"), format!("data/{s}.tgt.bpe")]))
            .collect();
        let merges = c.pipeline.merges;
        self.stage("bpe", &format!("merges={merges}"), &prepped, &refs(&bpe_outputs), None, |r| {
            let read = |p: &Path| -> Result<Vec<TokenizedSentence>, ExperimentError> {
                Ok(read_lines(p).at("bpe")?.iter().map(|l| TokenizedSentence::from_spaced(l)).collect())
            };
            let (src, tgt) = (read(&prepped[0])?, read(&prepped[1])?);
            let bpe = learn_bpe(src.iter().chain(&tgt), merges);
            fs::create_dir_all(r.path("bpe")).map_err(|err| ExperimentError::io(r.dir, err))?;
            bpe.save(&r.path("bpe/codes")).at("bpe")?;
            for (input, output) in prepped.iter().zip(&bpe_outputs[1..]) {
                let lines: Vec<String> = read(input)?.iter().map(|s| apply_bpe(&bpe, s).join(" ")).collect();
                write_lines(&r.path(output), &lines).at("bpe")?;
            }
            Ok(())
        })?;

        // vocab: per-side vocabularies from the segmented training data.
        let vocab_inputs = vec![self.path("data/train.src.bpe"), self.path("data/train.tgt.bpe")];
        let (min_count, max_size) = (c.pipeline.vocab_min_count, c.pipeline.vocab_max);
        self.stage(
            "vocab",
            &format!("min_count={min_count} max={max_size:?}"),
            &vocab_inputs,
            &["vocab/src.vocab", "vocab/tgt.vocab"],
            None,
            |r| {
                fs::create_dir_all(r.path("vocab")).map_err(|err| ExperimentError::io(r.dir, err))?;
                for (input, out) in vocab_inputs.iter().zip(["vocab/src.vocab", "vocab/tgt.vocab"]) {
                    let rows: Vec<Vec<String>> = read_lines(input)
                        .at("vocab")?
                        .iter()
                        .map(|l| l.split_whitespace().map(str::to_string).collect())
                        .collect();
                    build_vocab(rows.iter().map(Vec::as_slice), min_count, max_size)
                        .save(&r.path(out))
                        .at("vocab")?;
                }
                Ok(())
            },
        )?;

        // binarize: subwords to ids.
        let bin_inputs: Vec<PathBuf> = bpe_outputs[1..]
            .iter()
            .map(|p| self.path(p))
            .chain([self.path("vocab/src.vocab"), self.path("vocab/tgt.vocab")])
            .collect();
        let id_outputs: Vec<String> = SPLITS
            .iter()
            .flat_map(|s| [format!("data/{s}.src.ids"), format!("data/{s}.tgt.ids")])
            .collect();
        self.stage("binarize", "", &bin_inputs, &refs(&id_outputs), None, |r| {
            let pipeline = r.pipeline()?;
            for (i, (input, out)) in bin_inputs.iter().zip(&id_outputs).enumerate() {
                let vocab = if i % 2 == 0 { &pipeline.src_vocab } else { &pipeline.tgt_vocab };
                let rows: Vec<Vec<u32>> = read_lines(input)
                    .at("binarize")?
                    .iter()
                    .map(|l| encode(vocab, &l.split_whitespace().collect::<Vec<_>>()))
                    .collect();
                write_ids(&r.path(out), &rows).at("binarize")?;
            }
            Ok(())
        })?;

        let artifacts = vec![
            self.path("bpe/codes"),
            self.path("vocab/src.vocab"),
            self.path("vocab/tgt.vocab"),
        ];
        let mut train_ids = ["data/train.src.ids", "data/train.tgt.ids"];
        let dev_ids = ["data/dev.src.ids", "data/dev.tgt.ids"];

        // backtranslate: reverse model, pseudo pairs, mixed training ids.
        if let Some(bt) = &c.bt {
            let mut inputs = artifacts.clone();
            inputs.extend(train_ids.iter().chain(&dev_ids).map(|p| self.path(p)));
            inputs.extend([c.train.src.clone(), c.train.tgt.clone(), bt.mono.clone()]);
            let params = format!(
                "{:?}{:?}{:?}{}{}{}",
                c.model.to_pairs(),
                bt.reverse.to_pairs(),
                bt.options,
                bt.upsample_real,
                bt.reverse_model_seed,
                bt.mix_seed
            );
            let outputs = [
                "bt/reverse/best.dmt",
                "bt/pseudo.src",
                "bt/pseudo.tgt",
                "bt/pseudo.prov",
                "data/train.mixed.src.ids",
                "data/train.mixed.tgt.ids",
            ];
            self.stage("backtranslate", &params, &inputs, &outputs, Some("bt"), |r| {
                let forward = r.pipeline()?;
                let reverse_pipeline = forward.reversed();
                let reverse_train = r.load_pairs(&forward, train_ids, true)?;
                let reverse_dev = r.load_pairs(&forward, dev_ids, true)?;
                let best = r.train_model(
                    "backtranslate",
                    &reverse_pipeline,
                    &bt.reverse,
                    bt.reverse_model_seed,
                    &reverse_train,
                    &reverse_dev,
                    "bt/reverse",
                )?;
                let mono = load_monolingual(&bt.mono, c.tgt_lang.clone()).at("backtranslate")?;
                let pseudo = generate_pseudo_parallel(&best, &mono, &reverse_pipeline, &bt.options).at("backtranslate")?;
                pseudo.save(&r.path("bt/pseudo")).at("backtranslate")?;
                r.log.line(&format!(
                    "backtranslate: {} pseudo pairs, {} empty, {} filtered",
                    pseudo.len(),
                    pseudo.dropped_empty,
                    pseudo.dropped_ratio
                ));
                let (real, _) = load_parallel(&c.train.src, &c.train.tgt, c.src_lang.clone(), c.tgt_lang.clone()).at("backtranslate")?;
                let mixed: ParallelCorpus = mix(&real, &pseudo.corpus, bt.upsample_real, bt.mix_seed).at("backtranslate")?;
                let encoded = forward.encode_corpus(&mixed);
                let (src, tgt): (Vec<Vec<u32>>, Vec<Vec<u32>>) =
                    encoded.into_iter().map(|p| (p.source, p.target)).unzip();
                write_ids(&r.path("data/train.mixed.src.ids"), &src).at("backtranslate")?;
                write_ids(&r.path("data/train.mixed.tgt.ids"), &tgt).at("backtranslate")?;
                Ok(())
            })?;
            train_ids = ["data/train.mixed.src.ids", "data/train.mixed.tgt.ids"];
        }

        // train: forward model, best checkpoint by dev BLEU.
        let mut inputs = artifacts.clone();
        inputs.extend(train_ids.iter().chain(&dev_ids).map(|p| self.path(p)));
        let params = format!("{:?}{:?}{}", c.model.to_pairs(), c.training.to_pairs(), c.model_seed);
        self.stage("train", &params, &inputs, &["train/best.dmt", "train/report.tsv"], Some("train"), |r| {
            let pipeline = r.pipeline()?;
            let train_set = r.load_pairs(&pipeline, train_ids, false)?;
            let dev_set = r.load_pairs(&pipeline, dev_ids, false)?;
            r.train_model("train", &pipeline, &c.training, c.model_seed, &train_set, &dev_set, "train")?;
            Ok(())
        })?;

        // decode: test sources through the full pipeline.
        let mut inputs = artifacts.clone();
        inputs.extend([self.path("train/best.dmt"), self.path("data/test.src.raw")]);
        let params = format!("{:?}", c.decode.to_pairs());
        self.stage("decode", &params, &inputs, &["test.hyp"], None, |r| {
            let pipeline = r.pipeline()?;
            let checkpoint = Checkpoint::load(&r.path("train/best.dmt")).at("decode")?;
            checkpoint
                .check_vocabs(&pipeline.src_vocab, &pipeline.tgt_vocab)
                .at("decode")?;
            let model = checkpoint.to_model().at("decode")?;
            let sources = read_lines(&r.path("data/test.src.raw")).at("decode")?;
            let hyps = translate_batch(&model, &sources, &pipeline, &c.decode).at("decode")?;
            write_lines(&r.path("test.hyp"), &hyps).at("decode")?;
            Ok(())
        })?;

        // score: mean sentence BLEU against the test references.
        let inputs = vec![self.path("test.hyp"), self.path("data/test.ref"), self.path("train/report.tsv")];
        let params = format!("{}\t{}", c.system, c.pair());
        self.stage("score", &params, &inputs, &["results.tsv", "score.tsv"], None, |r| {
            let hyps = read_lines(&r.path("test.hyp")).at("score")?;
            let refs = read_lines(&r.path("data/test.ref")).at("score")?;
            let report = score_lines(&hyps, &refs, &BleuConfig::default()).at("score")?;
            fs::write(r.path("score.tsv"), report.to_tsv()).map_err(|err| ExperimentError::io(r.dir, err))?;
            let best_epoch = best_epoch_from_report(&r.path("train/report.tsv"))?;
            let results = format!(
                "system\tpair\tbleu\tsentences\tbest_epoch\n{}\t{}\t{:.4}\t{}\t{}\n",
                c.system,
                c.pair(),
                report.mean,
                hyps.len(),
                best_epoch
            );
            fs::write(r.path("results.tsv"), results).map_err(|err| ExperimentError::io(r.dir, err))?;
            Ok(())
        })?;

        let rows = super::collect_results(&[self.dir.to_path_buf()])?;
        Ok(rows.first().map_or(0.0, |row| row.bleu))
    }

    /// Pipeline rebuilt from the persisted BPE codes and vocabularies.
    fn pipeline(&self) -> Result<TextPipeline, ExperimentError> {
        let (source, target) = self.config.sides();
        Ok(TextPipeline {
            source,
            target,
            bpe: BpeModel::load(&self.path("bpe/codes")).at("load artifacts")?,
            src_vocab: Vocabulary::load(&self.path("vocab/src.vocab")).at("load artifacts")?,
            tgt_vocab: Vocabulary::load(&self.path("vocab/tgt.vocab")).at("load artifacts")?,
        })
    }

    fn load_pairs(&self, pipeline: &TextPipeline, files: [&str; 2], swap: bool) -> Result<Vec<EncodedPair>, ExperimentError> {
        let src = read_ids(&self.path(files[0]), pipeline.src_vocab.len()).at("load data")?;
        let tgt = read_ids(&self.path(files[1]), pipeline.tgt_vocab.len()).at("load data")?;
        if src.len() != tgt.len() {
            return Err(ExperimentError::Config(format!(
                "{} and {} differ in length",
                files[0], files[1]
            )));
        }
        Ok(src
            .into_iter()
            .zip(tgt)
            .map(|(s, t)| if swap { EncodedPair::new(t, s) } else { EncodedPair::new(s, t) })
            .collect())
    }

    #[allow(clippy::too_many_arguments)]
    fn train_model(
        &mut self,
        stage: &'static str,
        pipeline: &TextPipeline,
        config: &TrainConfig,
        model_seed: u64,
        train_set: &[EncodedPair],
        dev_set: &[EncodedPair],
        out_dir: &str,
    ) -> Result<Checkpoint, ExperimentError> {
        let mut model = build_model(
            &self.config.model,
            pipeline.src_vocab.len(),
            pipeline.tgt_vocab.len(),
            model_seed,
        )
        .at(stage)?;
        let options = TrainOptions {
            run_dir: Some(self.path(out_dir)),
            fingerprints: pipeline.fingerprints(),
            surface: Some(DevSurface::Text(&pipeline.tgt_vocab)),
            resume: true,
        };
        let outcome = train(&mut model, train_set, dev_set, config, &options).at(stage)?;
        for r in &outcome.report.epochs {
            self.log.line(&format!(
                "{stage}: epoch {} train_loss {:.4} dev_loss {:.4} dev_bleu {:.4} lr {}",
                r.epoch, r.train_loss, r.dev_loss, r.dev_bleu, r.lr
            ));
        }
        let best = outcome.report.best();
        self.log.line(&format!(
            "{stage}: {} epochs, best epoch {} dev bleu {:.4}, {:.1}s",
            outcome.report.epochs.len(),
            outcome.report.best_epoch,
            best.map_or(0.0, |b| b.dev_bleu),
            outcome.report.wall_seconds
        ));
        // A run resumed after its last epoch has no best checkpoint in memory.
        let best_path = self.path(&format!("{out_dir}/best.dmt"));
        if !best_path.exists() {
            outcome.best.save(&best_path).at(stage)?;
        }
        Checkpoint::load(&best_path).at(stage)
    }

    pub fn write_manifest(&self) -> Result<(), ExperimentError> {
        let mut text = format!("dmt_version\t{}\n", env!("CARGO_PKG_VERSION"));
        for (rel, hash) in &self.outputs {
            let _ = writeln!(text, "{rel}\t{hash}");
        }
        let path = self.path("manifest.tsv");
        fs::write(&path, text).map_err(|e| ExperimentError::io(&path, e))
    }
}

fn refs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

/// Output hashes when the stamp matches `input_hash` and every output
/// still hashes as recorded.
fn fresh(stamp: &str, input_hash: &str, dir: &Path, outputs: &[&str]) -> Option<Vec<(String, String)>> {
    let mut lines = stamp.lines();
    if lines.next()? != format!("input\t{input_hash}") {
        return None;
    }
    let mut recorded = Vec::new();
    for line in lines {
        let mut f = line.split('\t');
        if f.next()? != "output" {
            return None;
        }
        recorded.push((f.next()?.to_string(), f.next()?.to_string()));
    }
    if recorded.len() != outputs.len() || recorded.iter().zip(outputs).any(|((rel, _), want)| rel != want) {
        return None;
    }
    for (rel, hash) in &recorded {
        if file_hash(&dir.join(rel)).ok()? != *hash {
            return None;
        }
    }
    Some(recorded)
}

fn best_epoch_from_report(path: &Path) -> Result<usize, ExperimentError> {
    let text = fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
    let mut best = (0usize, f64::NEG_INFINITY);
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        if let (Some(epoch), Some(bleu)) = (f.first(), f.get(3)) {
            if let (Ok(epoch), Ok(bleu)) = (epoch.parse(), bleu.parse::<f64>()) {
                if bleu > best.1 {
                    best = (epoch, bleu);
                }
            }
        }
    }
    Ok(best.0)
}
