use std::path::{Path, PathBuf};

use super::ExperimentError;
use crate::autodiff::derive_seed;
use crate::backtranslation::{BtDirection, BtOptions};
use crate::corpus::LanguageTag;
use crate::decoding::DecodeConfig;
use crate::models::{Arch, ModelConfig};
use crate::pipeline::{PipelineOptions, Side};
use crate::training::TrainConfig;

/// Ordered `key=value` settings. Later entries override earlier ones.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: Vec<(String, String)>,
}

impl KeyValues {
    /// Parses `key = value` lines; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        let mut kv = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ExperimentError::Config(format!("line {}: expected key=value, got {raw:?}", i + 1)))?;
            kv.set(k.trim(), v.trim());
        }
        Ok(kv)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        match self.entries.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value.to_string(),
            None => self.entries.push((key.to_string(), value.to_string())),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

impl FromIterator<(String, String)> for KeyValues {
    fn from_iter<I: IntoIterator<Item = (String, String)>>(iter: I) -> Self {
        let mut kv = Self::default();
        for (k, v) in iter {
            kv.set(&k, &v);
        }
        kv
    }
}

/// Files of one split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPaths {
    pub src: PathBuf,
    pub tgt: PathBuf,
}

/// Back-translation settings of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct BtSettings {
    /// Target-language monolingual text.
    pub mono: PathBuf,
    pub options: BtOptions,
    pub upsample_real: usize,
    pub reverse: TrainConfig,
    pub reverse_model_seed: u64,
    pub mix_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    /// Row label in results and reports.
    pub system: String,
    pub src_lang: LanguageTag,
    pub tgt_lang: LanguageTag,
    pub train: SplitPaths,
    pub dev: SplitPaths,
    pub test: SplitPaths,
    pub pipeline: PipelineOptions,
    pub model: ModelConfig,
    pub model_seed: u64,
    pub training: TrainConfig,
    pub decode: DecodeConfig,
    pub bt: Option<BtSettings>,
    pub seed: u64,
}

fn lang(code: &str) -> Result<LanguageTag, ExperimentError> {
    LanguageTag::parse(code)
        .or_else(|_| LanguageTag::custom(code))
        .map_err(|e| ExperimentError::Config(e.to_string()))
}

fn parse<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T, ExperimentError> {
    raw.parse()
        .map_err(|_| ExperimentError::Config(format!("bad value {raw:?} for {key}")))
}

impl ExperimentConfig {
    /// Resolves settings over the defaults. Relative paths are taken
    /// against `base`; every referenced file must exist.
    pub fn from_kv(kv: &KeyValues, base: &Path) -> Result<Self, ExperimentError> {
        let need = |key: &str| {
            kv.get(key)
                .ok_or_else(|| ExperimentError::Config(format!("missing required key {key}")))
        };
        let get = |key: &str, default: &str| kv.get(key).unwrap_or(default).to_string();
        let path = |key: &str| -> Result<PathBuf, ExperimentError> {
            let p = base.join(need(key)?);
            if !p.is_file() {
                return Err(ExperimentError::MissingPath { key: key.into(), path: p });
            }
            Ok(p)
        };
        let split = |name: &str| -> Result<SplitPaths, ExperimentError> {
            Ok(SplitPaths {
                src: path(&format!("{name}.src"))?,
                tgt: path(&format!("{name}.tgt"))?,
            })
        };

        let name = need("name")?.to_string();
        if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
            return Err(ExperimentError::Config(format!("run name {name:?} is not a plain directory name")));
        }
        let seed: u64 = parse("seed", &get("seed", "1"))?;
        let (train, dev, test) = (split("train")?, split("dev")?, split("test")?);

        let pipeline = PipelineOptions {
            merges: parse("bpe.merges", &get("bpe.merges", "10000"))?,
            vocab_min_count: parse("vocab.min_count", &get("vocab.min_count", "1"))?,
            vocab_max: match get("vocab.max", "none").as_str() {
                "none" => None,
                n => Some(parse("vocab.max", n)?),
            },
            transliterate: parse("prep.transliterate", &get("prep.transliterate", "true"))?,
        };

        let arch: Arch = get("arch", "transformer")
            .parse()
            .map_err(|e: crate::models::ModelError| ExperimentError::Config(e.to_string()))?;
        let with_arch = |k: &str| {
            if k == "arch" {
                Some(arch.name().to_string())
            } else {
                kv.get(k).map(str::to_string)
            }
        };
        let model = ModelConfig::from_lookup(&with_arch).map_err(|e| ExperimentError::Config(e.to_string()))?;
        let model_seed = match kv.get("model.seed") {
            Some(s) => parse("model.seed", s)?,
            None => derive_seed(seed, "model"),
        };
        let train_lookup = |prefix: &'static str, label: &'static str| {
            move |k: &str| -> Option<String> {
                let own = k.strip_prefix("train.").map(|rest| format!("{prefix}{rest}"));
                match own.as_deref().and_then(|key| kv.get(key)) {
                    Some(v) => Some(v.to_string()),
                    None if k == "train.seed" => Some(derive_seed(seed, label).to_string()),
                    None if prefix != "train." => kv.get(k).map(str::to_string),
                    None => None,
                }
            }
        };
        let training = TrainConfig::from_lookup(arch, &train_lookup("train.", "train"))
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        let decode = DecodeConfig::from_lookup(&|k| kv.get(k).map(str::to_string))
            .map_err(|e| ExperimentError::Config(e.to_string()))?;

        let bt = if parse::<bool>("bt.enabled", &get("bt.enabled", "false"))? {
            let reverse = TrainConfig::from_lookup(arch, &train_lookup("bt.reverse.", "bt.reverse.train"))
                .map_err(|e| ExperimentError::Config(e.to_string()))?;
            let length_ratio = match get("bt.length_ratio", "none").as_str() {
                "none" => None,
                r => {
                    let (lo, hi) = r
                        .split_once(',')
                        .ok_or_else(|| ExperimentError::Config(format!("bt.length_ratio {r:?} must be lo,hi")))?;
                    Some((parse("bt.length_ratio", lo.trim())?, parse("bt.length_ratio", hi.trim())?))
                }
            };
            Some(BtSettings {
                mono: path("bt.mono")?,
                options: BtOptions {
                    decode: DecodeConfig::from_lookup(&|k| {
                        k.strip_prefix("decode.")
                            .and_then(|rest| kv.get(&format!("bt.decode.{rest}")))
                            .map(str::to_string)
                    })
                    .map_err(|e| ExperimentError::Config(e.to_string()))?,
                    direction: get("bt.direction", BtDirection::default().name())
                        .parse()
                        .map_err(|e: crate::backtranslation::BtError| ExperimentError::Config(e.to_string()))?,
                    length_ratio,
                },
                upsample_real: parse("bt.upsample_real", &get("bt.upsample_real", "1"))?,
                reverse,
                reverse_model_seed: derive_seed(seed, "bt.reverse.model"),
                mix_seed: derive_seed(seed, "bt.mix"),
            })
        } else {
            None
        };
        if bt.as_ref().is_some_and(|b| b.upsample_real == 0) {
            return Err(ExperimentError::Config("bt.upsample_real must be at least 1".into()));
        }

        Ok(Self {
            system: get("system", &format!("{}{}", arch.name(), if bt.is_some() { "+bt" } else { "" })),
            name,
            src_lang: lang(need("src_lang")?)?,
            tgt_lang: lang(need("tgt_lang")?)?,
            train,
            dev,
            test,
            pipeline,
            model,
            model_seed,
            training,
            decode,
            bt,
            seed,
        })
    }

    /// Language pair label such as `kn-ml`.
    pub fn pair(&self) -> String {
        format!("{}-{}", self.src_lang, self.tgt_lang)
    }

    pub fn sides(&self) -> (Side, Side) {
        let side = |l: &LanguageTag| {
            if self.pipeline.transliterate {
                Side::for_lang(l.clone())
            } else {
                Side::without_script(l.clone())
            }
        };
        (side(&self.src_lang), side(&self.tgt_lang))
    }

    /// Every resolved setting, defaults included, in a fixed order.
    pub fn snapshot(&self) -> KeyValues {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        put("name", self.name.clone());
        put("system", self.system.clone());
        put("seed", self.seed.to_string());
        put("src_lang", self.src_lang.to_string());
        put("tgt_lang", self.tgt_lang.to_string());
        for (name, split) in [("train", &self.train), ("dev", &self.dev), ("test", &self.test)] {
            put(&format!("{name}.src"), split.src.display().to_string());
            put(&format!("{name}.tgt"), split.tgt.display().to_string());
        }
        put("prep.transliterate", self.pipeline.transliterate.to_string());
        put("bpe.merges", self.pipeline.merges.to_string());
        put("vocab.min_count", self.pipeline.vocab_min_count.to_string());
        put(
            "vocab.max",
            self.pipeline.vocab_max.map_or_else(|| "none".into(), |m| m.to_string()),
        );
        put("model.seed", self.model_seed.to_string());
        out.extend(self.model.to_pairs());
        out.extend(self.training.to_pairs());
        out.extend(self.decode.to_pairs());
        out.push(("bt.enabled".into(), self.bt.is_some().to_string()));
        if let Some(bt) = &self.bt {
            let mut put = |k: &str, v: String| out.push((k.to_string(), v));
            put("bt.mono", bt.mono.display().to_string());
            put("bt.direction", bt.options.direction.name().to_string());
            put(
                "bt.length_ratio",
                bt.options
                    .length_ratio
                    .map_or_else(|| "none".into(), |(lo, hi)| format!("{lo},{hi}")),
            );
            put("bt.upsample_real", bt.upsample_real.to_string());
            out.extend(
                bt.options
                    .decode
                    .to_pairs()
                    .into_iter()
                    .map(|(k, v)| (format!("bt.{k}"), v)),
            );
            out.extend(
                bt.reverse
                    .to_pairs()
                    .into_iter()
                    .filter(|(k, _)| k != "train.arch")
                    .map(|(k, v)| (k.replacen("train.", "bt.reverse.", 1), v)),
            );
        }
        out.into_iter().collect()
    }
}
