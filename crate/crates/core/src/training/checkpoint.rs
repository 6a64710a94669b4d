//! Binary checkpoint files.
//!
//! Layout (little-endian): the magic `DMT1`; a `u64` byte length followed by
//! UTF-8 `key=value` lines; a `u64` tensor count; then per tensor a `u32`
//! name length, the name, a `u8` dtype tag (1 = f64), a `u32` rank, `rank`
//! `u64` extents and the raw values.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::AdamState;
use crate::autodiff::Tensor;
use crate::models::{build_model, ModelConfig, ModelError, SeqModel};
use crate::subword::Vocabulary;

pub const MAGIC: &[u8; 4] = b"DMT1";
const DTYPE_F64: u8 = 1;
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint or unsupported format version (header {found:?})")]
    Version { found: String },
    #[error("checkpoint truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("{which} vocabulary fingerprint {found} does not match the checkpoint's {expected}")]
    Fingerprint {
        which: &'static str,
        expected: String,
        found: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Everything needed to rebuild a model and resume its optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub src_fingerprint: String,
    pub tgt_fingerprint: String,
    pub epoch: usize,
    /// Free-form metadata (train config, metrics, schedule state).
    pub extra: Vec<(String, String)>,
    pub params: Vec<(String, Tensor)>,
    pub adam: Option<AdamState>,
}

impl Checkpoint {
    pub fn from_model(
        model: &SeqModel,
        fingerprints: (&str, &str),
        epoch: usize,
        adam: Option<&AdamState>,
        extra: Vec<(String, String)>,
    ) -> Self {
        let store = model.params();
        Self {
            model_config: model.config().clone(),
            src_vocab_size: model.src_vocab_size(),
            tgt_vocab_size: model.tgt_vocab_size(),
            src_fingerprint: fingerprints.0.to_string(),
            tgt_fingerprint: fingerprints.1.to_string(),
            epoch,
            extra,
            params: store.ids().map(|id| (store.name(id).to_string(), store.value(id).clone())).collect(),
            adam: adam.cloned(),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.extra.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Rebuilds the model with the stored parameter values.
    pub fn to_model(&self) -> Result<SeqModel, CheckpointError> {
        let mut model = build_model(&self.model_config, self.src_vocab_size, self.tgt_vocab_size, 0)?;
        let store = model.params_mut();
        if store.len() != self.params.len() {
            return Err(CheckpointError::Malformed(format!(
                "model has {} parameters, checkpoint {}",
                store.len(),
                self.params.len()
            )));
        }
        for (name, tensor) in &self.params {
            let id = store
                .find(name)
                .ok_or_else(|| CheckpointError::Malformed(format!("unknown parameter {name}")))?;
            if store.value(id).shape() != tensor.shape() {
                return Err(CheckpointError::Malformed(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    tensor.shape(),
                    store.value(id).shape()
                )));
            }
            *store.value_mut(id) = tensor.clone();
        }
        Ok(model)
    }

    /// Fails unless both vocabularies match the stored fingerprints.
    pub fn check_vocabs(&self, src: &Vocabulary, tgt: &Vocabulary) -> Result<(), CheckpointError> {
        for (which, expected, vocab) in [
            ("source", &self.src_fingerprint, src),
            ("target", &self.tgt_fingerprint, tgt),
        ] {
            let found = vocab.fingerprint();
            if &found != expected {
                return Err(CheckpointError::Fingerprint {
                    which,
                    expected: expected.clone(),
                    found,
                });
            }
        }
        Ok(())
    }

    /// SHA-256 of the serialized bytes, hex encoded.
    pub fn fingerprint(&self) -> Result<String, CheckpointError> {
        use sha2::{Digest, Sha256};
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    fn meta(&self) -> Vec<(String, String)> {
        let mut meta = vec![("format_version".to_string(), "1".to_string())];
        meta.extend(self.model_config.to_pairs());
        let mut put = |k: &str, v: String| meta.push((k.to_string(), v));
        put("src_vocab_size", self.src_vocab_size.to_string());
        put("tgt_vocab_size", self.tgt_vocab_size.to_string());
        put("src_vocab_fingerprint", self.src_fingerprint.clone());
        put("tgt_vocab_fingerprint", self.tgt_fingerprint.clone());
        put("epoch", self.epoch.to_string());
        if let Some(adam) = &self.adam {
            put("adam_step", adam.step.to_string());
        }
        meta.extend(self.extra.iter().cloned());
        meta
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut text = String::new();
        for (k, v) in self.meta() {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(CheckpointError::Malformed(format!("metadata entry {k:?} cannot be stored")));
            }
            text.push_str(&k);
            text.push('=');
            text.push_str(&v);
            text.push('\n');
        }
        let mut tensors: Vec<(String, &Tensor)> = self.params.iter().map(|(n, t)| (n.clone(), t)).collect();
        let mut moments = Vec::new();
        if let Some(adam) = &self.adam {
            if adam.m.len() != self.params.len() || adam.v.len() != self.params.len() {
                return Err(CheckpointError::Malformed("optimizer state does not match parameters".into()));
            }
            for (prefix, buffers) in [(ADAM_M, &adam.m), (ADAM_V, &adam.v)] {
                for ((name, t), buf) in self.params.iter().zip(buffers) {
                    let tensor = Tensor::new(t.shape(), buf.clone())
                        .map_err(|e| CheckpointError::Malformed(format!("optimizer state for {name}: {e}")))?;
                    moments.push((format!("{prefix}{name}"), tensor));
                }
            }
        }
        tensors.extend(moments.iter().map(|(n, t)| (n.clone(), t)));

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(CheckpointError::Version {
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let meta_len = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| CheckpointError::Malformed("metadata is not UTF-8".into()))?;
        let mut meta = Vec::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::Malformed(format!("metadata line {line:?}")))?;
            meta.push((k.to_string(), v.to_string()));
        }
        let lookup = |key: &str| meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone());
        let need = |key: &str| lookup(key).ok_or_else(|| CheckpointError::Malformed(format!("missing {key}")));
        let number = |key: &str| -> Result<u64, CheckpointError> {
            need(key)?
                .parse()
                .map_err(|_| CheckpointError::Malformed(format!("bad {key}")))
        };
        if need("format_version")? != "1" {
            return Err(CheckpointError::Version {
                found: format!("format_version={}", need("format_version")?),
            });
        }
        let model_config = ModelConfig::from_lookup(&lookup)?;
        let adam_step = lookup("adam_step")
            .map(|s| s.parse::<u64>().map_err(|_| CheckpointError::Malformed("bad adam_step".into())))
            .transpose()?;

        let count = r.u64()? as usize;
        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(CheckpointError::Malformed(format!("tensor {name} has dtype tag {dtype}")));
            }
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or(CheckpointError::Truncated { offset: r.pos })?)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if let Some(rest) = name.strip_prefix(ADAM_M) {
                m.push((rest.to_string(), data));
            } else if let Some(rest) = name.strip_prefix(ADAM_V) {
                v.push((rest.to_string(), data));
            } else {
                let tensor = Tensor::new(&shape, data)
                    .map_err(|e| CheckpointError::Malformed(format!("tensor {name}: {e}")))?;
                params.push((name, tensor));
            }
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        let adam = match adam_step {
            None if m.is_empty() && v.is_empty() => None,
            Some(step) => {
                let order = |moments: Vec<(String, Vec<f64>)>| -> Result<Vec<Vec<f64>>, CheckpointError> {
                    let names_match = moments.len() == params.len()
                        && moments.iter().zip(&params).all(|((a, _), (b, _))| a == b);
                    if !names_match {
                        return Err(CheckpointError::Malformed("optimizer state does not match parameters".into()));
                    }
                    Ok(moments.into_iter().map(|(_, d)| d).collect())
                };
                Some(AdamState {
                    m: order(m)?,
                    v: order(v)?,
                    step,
                })
            }
            None => return Err(CheckpointError::Malformed("optimizer moments without adam_step".into())),
        };

        let mut known: Vec<String> = vec![
            "format_version".into(),
            "src_vocab_size".into(),
            "tgt_vocab_size".into(),
            "src_vocab_fingerprint".into(),
            "tgt_vocab_fingerprint".into(),
            "epoch".into(),
            "adam_step".into(),
        ];
        known.extend(model_config.to_pairs().into_iter().map(|(k, _)| k));
        let extra = meta.iter().filter(|(k, _)| !known.contains(k)).cloned().collect();
        Ok(Self {
            src_vocab_size: number("src_vocab_size")? as usize,
            tgt_vocab_size: number("tgt_vocab_size")? as usize,
            src_fingerprint: need("src_vocab_fingerprint")?,
            tgt_fingerprint: need("tgt_vocab_fingerprint")?,
            epoch: number("epoch")? as usize,
            model_config,
            extra,
            params,
            adam,
        })
    }

    /// Writes via a temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(CheckpointError::Truncated { offset: self.bytes.len() }),
        }
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
