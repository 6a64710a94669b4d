use std::str::FromStr;

use super::TrainError;
use crate::models::Arch;

/// How sentence pairs are grouped into batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSpec {
    /// Padded width times pair count stays within the budget on both sides.
    MaxTokens(usize),
    /// Fixed number of pairs per batch (last one may be short).
    Sentences(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub arch: Arch,
    pub learning_rate: f64,
    /// 0 disables token-budget batching.
    pub max_tokens: usize,
    /// 0 disables fixed-size batching.
    pub batch_size: usize,
    pub epochs: usize,
    pub label_smoothing: f64,
    /// Overrides the model's dropout when set.
    pub dropout: Option<f64>,
    pub lr_shrink: f64,
    pub patience: usize,
    /// Smallest dev-loss decrease that counts as an improvement.
    pub min_improvement: f64,
    /// Global L2 gradient clip; 0 turns clipping off.
    pub clip_norm: f64,
    pub seed: u64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    /// Linear warmup over this many steps; 0 means a flat rate.
    pub warmup_steps: usize,
    /// Per-epoch checkpoints kept on disk (the best is always kept).
    pub keep_last: Option<usize>,
    /// Stop once dev BLEU reaches this value.
    pub stop_at_bleu: Option<f64>,
    pub dev_beam: usize,
    pub dev_length_penalty: f64,
    /// Sentences decoded together during dev evaluation.
    pub eval_chunk: usize,
}

impl TrainConfig {
    pub fn for_arch(arch: Arch) -> Self {
        let transformer = arch == Arch::Transformer;
        let (learning_rate, epochs) = match arch {
            Arch::Transformer => (5e-4, 10),
            Arch::Lstm | Arch::BiLstm => (5e-3, 25),
            Arch::Conv => (5e-4, 20),
        };
        Self {
            arch,
            learning_rate,
            max_tokens: if transformer { 0 } else { 12000 },
            batch_size: if transformer { 128 } else { 0 },
            epochs,
            label_smoothing: 0.1,
            dropout: None,
            lr_shrink: 0.5,
            patience: 1,
            min_improvement: 1e-4,
            clip_norm: if transformer { 0.0 } else { 1.0 },
            seed: 1,
            adam_betas: if transformer { (0.9, 0.98) } else { (0.9, 0.999) },
            adam_eps: 1e-8,
            warmup_steps: 0,
            keep_last: None,
            stop_at_bleu: None,
            dev_beam: 1,
            dev_length_penalty: 1.0,
            eval_chunk: 64,
        }
    }

    /// Settings used for fine-tuning a pretrained model.
    pub fn finetune_preset(arch: Arch) -> Self {
        Self {
            learning_rate: 3e-5,
            max_tokens: 1568,
            ..Self::for_arch(arch)
        }
    }

    pub fn batch_spec(&self) -> Result<BatchSpec, TrainError> {
        match (self.max_tokens, self.batch_size) {
            (0, 0) | (1.., 1..) => Err(TrainError::InvalidConfig(
                "exactly one of max_tokens and batch_size must be non-zero".into(),
            )),
            (n, 0) => Ok(BatchSpec::MaxTokens(n)),
            (0, n) => Ok(BatchSpec::Sentences(n)),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.batch_spec()?;
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.lr_shrink > 0.0 && self.lr_shrink <= 1.0) {
            return bad(format!("lr_shrink must lie in (0, 1], got {}", self.lr_shrink));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing must lie in [0, 1), got {}", self.label_smoothing));
        }
        if let Some(p) = self.dropout {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("dropout must lie in [0, 1), got {p}"));
            }
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("adam betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be non-negative".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.dev_beam == 0 || self.eval_chunk == 0 {
            return bad("dev_beam and eval_chunk must be at least 1".into());
        }
        if self.keep_last == Some(0) {
            return bad("keep_last must be at least 1".into());
        }
        Ok(())
    }

    /// `train.*` key=value pairs, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let fields = [
            ("arch", self.arch.name().to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("max_tokens", self.max_tokens.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("label_smoothing", self.label_smoothing.to_string()),
            ("dropout", opt(self.dropout.map(|d| d.to_string()))),
            ("lr_shrink", self.lr_shrink.to_string()),
            ("patience", self.patience.to_string()),
            ("min_improvement", self.min_improvement.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("seed", self.seed.to_string()),
            ("adam_beta1", self.adam_betas.0.to_string()),
            ("adam_beta2", self.adam_betas.1.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("keep_last", opt(self.keep_last.map(|k| k.to_string()))),
            ("stop_at_bleu", opt(self.stop_at_bleu.map(|b| b.to_string()))),
            ("dev_beam", self.dev_beam.to_string()),
            ("dev_length_penalty", self.dev_length_penalty.to_string()),
            ("eval_chunk", self.eval_chunk.to_string()),
        ];
        fields.into_iter().map(|(k, v)| (format!("train.{k}"), v)).collect()
    }

    /// Reads `train.*` keys over the defaults for `arch` (or `train.arch`).
    pub fn from_lookup(arch: Arch, get: &dyn Fn(&str) -> Option<String>) -> Result<Self, TrainError> {
        let key = |k: &str| get(&format!("train.{k}"));
        let arch = match key("arch") {
            Some(a) => a.parse().map_err(|_| TrainError::InvalidConfig(format!("unknown arch {a:?}")))?,
            None => arch,
        };
        let mut c = Self::for_arch(arch);
        set(&key, "learning_rate", &mut c.learning_rate)?;
        set(&key, "max_tokens", &mut c.max_tokens)?;
        set(&key, "batch_size", &mut c.batch_size)?;
        // Naming only one batching mode switches to it.
        match (key("max_tokens").is_some(), key("batch_size").is_some()) {
            (true, false) => c.batch_size = 0,
            (false, true) => c.max_tokens = 0,
            _ => {}
        }
        set(&key, "epochs", &mut c.epochs)?;
        set(&key, "label_smoothing", &mut c.label_smoothing)?;
        set_opt(&key, "dropout", &mut c.dropout)?;
        set(&key, "lr_shrink", &mut c.lr_shrink)?;
        set(&key, "patience", &mut c.patience)?;
        set(&key, "min_improvement", &mut c.min_improvement)?;
        set(&key, "clip_norm", &mut c.clip_norm)?;
        set(&key, "seed", &mut c.seed)?;
        set(&key, "adam_beta1", &mut c.adam_betas.0)?;
        set(&key, "adam_beta2", &mut c.adam_betas.1)?;
        set(&key, "adam_eps", &mut c.adam_eps)?;
        set(&key, "warmup_steps", &mut c.warmup_steps)?;
        set_opt(&key, "keep_last", &mut c.keep_last)?;
        set_opt(&key, "stop_at_bleu", &mut c.stop_at_bleu)?;
        set(&key, "dev_beam", &mut c.dev_beam)?;
        set(&key, "dev_length_penalty", &mut c.dev_length_penalty)?;
        set(&key, "eval_chunk", &mut c.eval_chunk)?;
        c.validate()?;
        Ok(c)
    }
}

fn set<T: FromStr>(get: &dyn Fn(&str) -> Option<String>, name: &str, slot: &mut T) -> Result<(), TrainError> {
    if let Some(raw) = get(name) {
        *slot = raw
            .trim()
            .parse()
            .map_err(|_| TrainError::InvalidConfig(format!("bad value {raw:?} for train.{name}")))?;
    }
    Ok(())
}

fn set_opt<T: FromStr>(get: &dyn Fn(&str) -> Option<String>, name: &str, slot: &mut Option<T>) -> Result<(), TrainError> {
    if let Some(raw) = get(name) {
        let raw = raw.trim();
        *slot = if raw == "none" || raw.is_empty() {
            None
        } else {
            Some(
                raw.parse()
                    .map_err(|_| TrainError::InvalidConfig(format!("bad value {raw:?} for train.{name}")))?,
            )
        };
    }
    Ok(())
}
