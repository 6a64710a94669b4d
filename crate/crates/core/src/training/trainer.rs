use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::batching::strip_eos;
use super::{adam_step, AdamParams, AdamState, Batch, BatchPlan, Checkpoint, EncodedPair, PlateauSchedule, TrainConfig, TrainError};
use crate::autodiff::{derive_seed, RngState, Tape};
use crate::bleu::{score_lines, BleuConfig};
use crate::decoding::{decode_best, greedy_batch, DecodeConfig};
use crate::models::{label_smoothed_loss, Ctx, SeqModel};
use crate::subword::{decode, undo_bpe, Vocabulary, PAD};
use crate::textnorm::detokenize;

/// How dev hypotheses and references are turned into text for BLEU.
#[derive(Debug, Clone, Copy)]
pub enum DevSurface<'a> {
    /// Token ids written as decimal numbers.
    Ids,
    /// Ids mapped to subwords, BPE undone and detokenized.
    Text(&'a Vocabulary),
}

impl DevSurface<'_> {
    pub fn render(&self, ids: &[u32]) -> Result<String, TrainError> {
        let ids = strip_eos(ids);
        Ok(match self {
            DevSurface::Ids => ids.iter().map(u32::to_string).collect::<Vec<_>>().join(" "),
            DevSurface::Text(vocab) => detokenize(&undo_bpe(&decode(vocab, ids)?)),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_bleu: f64,
    /// Rate used during this epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch with the highest dev BLEU, earliest on ties.
    pub best_epoch: usize,
    pub wall_seconds: f64,
    pub skipped_pairs: usize,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|r| r.epoch == self.best_epoch)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\tdev_loss\tdev_bleu\tlr\n");
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{}\t{:.6}\t{:.6}\t{:.4}\t{}",
                r.epoch, r.train_loss, r.dev_loss, r.dev_bleu, r.lr
            );
        }
        out
    }
}

/// Index of the highest BLEU, earliest on ties.
pub fn best_epoch_of(records: &[EpochRecord]) -> Option<usize> {
    let mut best: Option<&EpochRecord> = None;
    for r in records {
        if best.map_or(true, |b| r.dev_bleu > b.dev_bleu) {
            best = Some(r);
        }
    }
    best.map(|r| r.epoch)
}

/// Where and how a training run persists its state.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions<'a> {
    /// Receives `checkpoints/epochNNN.dmt`, `best.dmt` and `report.tsv`.
    /// Without it nothing is written and resuming is impossible.
    pub run_dir: Option<PathBuf>,
    /// Source and target vocabulary fingerprints stored in checkpoints.
    pub fingerprints: (String, String),
    /// Dev scoring surface; ids when unset.
    pub surface: Option<DevSurface<'a>>,
    /// Pick up from the newest epoch checkpoint in `run_dir`.
    pub resume: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub report: TrainReport,
}

pub fn epoch_checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join("checkpoints").join(format!("epoch{epoch:03}.dmt"))
}

struct Resumed {
    start_epoch: usize,
    records: Vec<EpochRecord>,
    schedule: PlateauSchedule,
    adam: AdamState,
    best: Option<Checkpoint>,
}

/// Trains `model` in place and returns the checkpoint with the best dev
/// BLEU. `model` ends in its final (not necessarily best) state.
pub fn train(
    model: &mut SeqModel,
    train_set: &[EncodedPair],
    dev_set: &[EncodedPair],
    config: &TrainConfig,
    options: &TrainOptions<'_>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyCorpus("train"));
    }
    if dev_set.is_empty() {
        return Err(TrainError::EmptyCorpus("dev"));
    }
    if let Some(p) = config.dropout {
        model.set_dropout(p);
    }
    let spec = config.batch_spec()?;
    let plan = BatchPlan::new(train_set, spec)?;
    if plan.batches.is_empty() {
        return Err(TrainError::EmptyCorpus("train (every pair exceeds max_tokens)"));
    }
    let dev_plan = BatchPlan::new(dev_set, spec)?;
    let started = Instant::now();
    let surface = options.surface.unwrap_or(DevSurface::Ids);
    let dev_refs: Vec<String> = dev_set
        .iter()
        .map(|p| surface.render(&p.target))
        .collect::<Result<_, _>>()?;
    if let Some(dir) = &options.run_dir {
        fs::create_dir_all(dir.join("checkpoints")).map_err(|e| TrainError::io(dir, e))?;
    }

    let resumed = match (&options.run_dir, options.resume) {
        (Some(dir), true) => resume_state(model, dir, options, config)?,
        _ => None,
    };
    let Resumed {
        start_epoch,
        mut records,
        mut schedule,
        mut adam,
        mut best,
    } = resumed.unwrap_or_else(|| Resumed {
        start_epoch: 1,
        records: Vec::new(),
        schedule: PlateauSchedule::new(config.learning_rate, config.lr_shrink, config.patience, config.min_improvement),
        adam: AdamState::new(model.params()),
        best: None,
    });
    let mut stopped_early = reached_target(config, records.last());

    let mut epoch = start_epoch;
    while epoch <= config.epochs && !stopped_early {
        let lr = schedule.lr();
        let mut rng = RngState::new(derive_seed(config.seed, &format!("dropout.{epoch}")));
        let (mut loss_sum, mut tokens) = (0.0, 0usize);
        for b in plan.epoch_order(config.seed, epoch) {
            let batch = Batch::collate(train_set, &plan.batches[b])?;
            let n = batch.target_tokens();
            let (value, grads) = {
                let tape = Tape::new();
                let ctx = Ctx::train(&tape, model.params(), rng);
                let logits = model.forward(&ctx, &batch.source, &batch.prev_output)?;
                let loss = label_smoothed_loss(logits, &batch.target, PAD, config.label_smoothing)?;
                let value = loss.value().item();
                let grads = if value.is_finite() { Some(tape.backward(loss)?) } else { None };
                rng = ctx.into_rng().expect("training context");
                (value, grads)
            };
            let Some(grads) = grads else {
                return Err(diverged(options, epoch, &records));
            };
            let store = model.params_mut();
            store.zero_grad();
            store.accumulate(&grads);
            let warm = if config.warmup_steps > 0 {
                ((adam.step + 1) as f64 / config.warmup_steps as f64).min(1.0)
            } else {
                1.0
            };
            let hp = AdamParams {
                lr: lr * warm,
                betas: config.adam_betas,
                eps: config.adam_eps,
                clip_norm: config.clip_norm,
            };
            let step = adam_step(store, &mut adam, &hp);
            store.zero_grad();
            if let Err(TrainError::NonFiniteGradient { .. }) = step {
                return Err(diverged(options, epoch, &records));
            }
            step?;
            loss_sum += value * n as f64;
            tokens += n;
        }
        let train_loss = loss_sum / tokens.max(1) as f64;
        let dev_loss = evaluate_loss(model, dev_set, &dev_plan, config.label_smoothing)?;
        if !dev_loss.is_finite() {
            return Err(diverged(options, epoch, &records));
        }
        let dev_bleu = evaluate_bleu(model, dev_set, &dev_refs, surface, config)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            dev_loss,
            dev_bleu,
            lr,
        };
        log::info!(
            "epoch {epoch}: train_loss {train_loss:.4} dev_loss {dev_loss:.4} dev_bleu {dev_bleu:.4} lr {lr}"
        );
        schedule.observe(dev_loss);
        records.push(record);
        let improved = best_epoch_of(&records) == Some(epoch);
        let checkpoint = Checkpoint::from_model(
            model,
            (&options.fingerprints.0, &options.fingerprints.1),
            epoch,
            Some(&adam),
            state_meta(config, &schedule, &records),
        );
        if let Some(dir) = &options.run_dir {
            checkpoint.save(&epoch_checkpoint_path(dir, epoch))?;
            if improved {
                checkpoint.save(&dir.join("best.dmt"))?;
            }
            prune(dir, config.keep_last, epoch, best_epoch_of(&records).unwrap_or(epoch))?;
            let partial = report(&records, started, plan.skipped, false);
            fs::write(dir.join("report.tsv"), partial.to_tsv()).map_err(|e| TrainError::io(dir, e))?;
        }
        if improved {
            best = Some(checkpoint);
        }
        stopped_early = reached_target(config, records.last()) && epoch < config.epochs;
        epoch += 1;
    }

    let report = report(&records, started, plan.skipped, stopped_early);
    if let Some(dir) = &options.run_dir {
        fs::write(dir.join("report.tsv"), report.to_tsv()).map_err(|e| TrainError::io(dir, e))?;
    }
    let best = match best {
        Some(b) => b,
        None => Checkpoint::from_model(
            model,
            (&options.fingerprints.0, &options.fingerprints.1),
            0,
            Some(&adam),
            state_meta(config, &schedule, &records),
        ),
    };
    Ok(TrainOutcome { best, report })
}

fn reached_target(config: &TrainConfig, last: Option<&EpochRecord>) -> bool {
    matches!((config.stop_at_bleu, last), (Some(target), Some(r)) if r.dev_bleu >= target)
}

fn report(records: &[EpochRecord], started: Instant, skipped: usize, stopped_early: bool) -> TrainReport {
    TrainReport {
        epochs: records.to_vec(),
        best_epoch: best_epoch_of(records).unwrap_or(0),
        wall_seconds: started.elapsed().as_secs_f64(),
        skipped_pairs: skipped,
        stopped_early,
    }
}

fn diverged(options: &TrainOptions<'_>, epoch: usize, records: &[EpochRecord]) -> TrainError {
    let last_good = match (&options.run_dir, records.last()) {
        (Some(dir), Some(r)) => Some(epoch_checkpoint_path(dir, r.epoch)),
        _ => None,
    };
    TrainError::Diverged { epoch, last_good }
}

/// Token-weighted label-smoothed loss over `pairs`, without dropout.
pub fn evaluate_loss(model: &SeqModel, pairs: &[EncodedPair], plan: &BatchPlan, epsilon: f64) -> Result<f64, TrainError> {
    let (mut sum, mut tokens) = (0.0, 0usize);
    for indices in &plan.batches {
        let batch = Batch::collate(pairs, indices)?;
        let tape = Tape::inference();
        let ctx = Ctx::eval(&tape, model.params());
        let logits = model.forward(&ctx, &batch.source, &batch.prev_output)?;
        let loss = label_smoothed_loss(logits, &batch.target, PAD, epsilon)?;
        let n = batch.target_tokens();
        sum += loss.value().item() * n as f64;
        tokens += n;
    }
    Ok(sum / tokens.max(1) as f64)
}

/// Mean sentence BLEU of decoded dev sources against `references`.
pub fn evaluate_bleu(
    model: &SeqModel,
    pairs: &[EncodedPair],
    references: &[String],
    surface: DevSurface<'_>,
    config: &TrainConfig,
) -> Result<f64, TrainError> {
    let decode_config = DecodeConfig {
        beam: config.dev_beam,
        max_len: None,
        length_penalty: config.dev_length_penalty,
    };
    let sources: Vec<Vec<u32>> = pairs.iter().map(|p| p.source.clone()).collect();
    let hyps = if config.dev_beam == 1 {
        greedy_batch(model, &sources, &decode_config, config.eval_chunk)?
    } else {
        sources
            .iter()
            .map(|s| decode_best(model, s, &decode_config))
            .collect::<Result<_, _>>()?
    };
    let candidates: Vec<String> = hyps.iter().map(|h| surface.render(&h.ids)).collect::<Result<_, _>>()?;
    Ok(score_lines(&candidates, references, &BleuConfig::default())?.mean)
}

fn state_meta(config: &TrainConfig, schedule: &PlateauSchedule, records: &[EpochRecord]) -> Vec<(String, String)> {
    let mut meta = config.to_pairs();
    meta.push(("schedule.best_loss".into(), schedule.best_loss.to_string()));
    meta.push(("schedule.bad_epochs".into(), schedule.bad_epochs.to_string()));
    meta.push(("schedule.shrinks".into(), schedule.shrinks.to_string()));
    for r in records {
        meta.push((
            format!("report.{:03}", r.epoch),
            format!("{}\t{}\t{}\t{}", r.train_loss, r.dev_loss, r.dev_bleu, r.lr),
        ));
    }
    if let Some(last) = records.last() {
        meta.push(("dev_loss".into(), last.dev_loss.to_string()));
        meta.push(("dev_bleu".into(), last.dev_bleu.to_string()));
    }
    meta
}

fn parse_records(checkpoint: &Checkpoint) -> Result<Vec<EpochRecord>, TrainError> {
    let bad = |k: &str| TrainError::Resume(format!("bad report entry {k}"));
    let mut out = Vec::new();
    for (k, v) in &checkpoint.extra {
        let Some(epoch) = k.strip_prefix("report.") else { continue };
        let epoch: usize = epoch.parse().map_err(|_| bad(k))?;
        let f: Vec<f64> = v.split('\t').map(str::parse).collect::<Result<_, _>>().map_err(|_| bad(k))?;
        if f.len() != 4 {
            return Err(bad(k));
        }
        out.push(EpochRecord {
            epoch,
            train_loss: f[0],
            dev_loss: f[1],
            dev_bleu: f[2],
            lr: f[3],
        });
    }
    Ok(out)
}

fn resume_state(
    model: &mut SeqModel,
    dir: &Path,
    options: &TrainOptions<'_>,
    config: &TrainConfig,
) -> Result<Option<Resumed>, TrainError> {
    let Some(last) = newest_epoch(dir)? else { return Ok(None) };
    let checkpoint = Checkpoint::load(&epoch_checkpoint_path(dir, last))?;
    if (checkpoint.src_fingerprint.as_str(), checkpoint.tgt_fingerprint.as_str())
        != (options.fingerprints.0.as_str(), options.fingerprints.1.as_str())
    {
        return Err(TrainError::Resume("vocabulary fingerprints differ from the run being resumed".into()));
    }
    if checkpoint.model_config != *model.config() {
        return Err(TrainError::Resume("model config differs from the run being resumed".into()));
    }
    let restored = checkpoint.to_model()?;
    *model = restored;
    let adam = checkpoint
        .adam
        .clone()
        .ok_or_else(|| TrainError::Resume("checkpoint has no optimizer state".into()))?;
    let num = |key: &str| -> Result<f64, TrainError> {
        checkpoint
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| TrainError::Resume(format!("checkpoint lacks {key}")))
    };
    let mut schedule = PlateauSchedule::new(config.learning_rate, config.lr_shrink, config.patience, config.min_improvement);
    schedule.best_loss = num("schedule.best_loss")?;
    schedule.bad_epochs = num("schedule.bad_epochs")? as usize;
    schedule.shrinks = num("schedule.shrinks")? as usize;
    let records = parse_records(&checkpoint)?;
    let best = match best_epoch_of(&records) {
        Some(e) if e == last => Some(checkpoint.clone()),
        Some(_) => Some(Checkpoint::load(&dir.join("best.dmt"))?),
        None => None,
    };
    log::info!("resuming after epoch {last}");
    Ok(Some(Resumed {
        start_epoch: last + 1,
        records,
        schedule,
        adam,
        best,
    }))
}

fn epoch_files(dir: &Path) -> Result<Vec<usize>, TrainError> {
    let ckpt = dir.join("checkpoints");
    if !ckpt.exists() {
        return Ok(Vec::new());
    }
    let mut epochs = Vec::new();
    for entry in fs::read_dir(&ckpt).map_err(|e| TrainError::io(&ckpt, e))? {
        let entry = entry.map_err(|e| TrainError::io(&ckpt, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(n) = name.strip_prefix("epoch").and_then(|s| s.strip_suffix(".dmt")) {
            if let Ok(n) = n.parse() {
                epochs.push(n);
            }
        }
    }
    epochs.sort_unstable();
    Ok(epochs)
}

fn newest_epoch(dir: &Path) -> Result<Option<usize>, TrainError> {
    Ok(epoch_files(dir)?.last().copied())
}

fn prune(dir: &Path, keep_last: Option<usize>, current: usize, best: usize) -> Result<(), TrainError> {
    let Some(keep) = keep_last else { return Ok(()) };
    for e in epoch_files(dir)? {
        if e + keep <= current && e != best {
            let path = epoch_checkpoint_path(dir, e);
            fs::remove_file(&path).map_err(|err| TrainError::io(&path, err))?;
        }
    }
    Ok(())
}
