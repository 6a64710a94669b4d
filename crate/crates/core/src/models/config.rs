use std::fmt;
use std::str::FromStr;

use super::ModelError;

/// Architecture family of a [`super::SeqModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arch {
    Lstm,
    BiLstm,
    Conv,
    Transformer,
}

impl Arch {
    pub const ALL: [Arch; 4] = [Arch::Lstm, Arch::BiLstm, Arch::Conv, Arch::Transformer];

    pub fn name(self) -> &'static str {
        match self {
            Arch::Lstm => "lstm",
            Arch::BiLstm => "bilstm",
            Arch::Conv => "conv",
            Arch::Transformer => "transformer",
        }
    }

    pub fn is_recurrent(self) -> bool {
        matches!(self, Arch::Lstm | Arch::BiLstm)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| ModelError::InvalidConfig(format!("unknown architecture {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    pub max_positions: usize,
    /// Accept a head count that does not divide `d_model`; the leading
    /// heads then get one extra dimension each.
    pub allow_uneven_heads: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            enc_layers: 3,
            dec_layers: 3,
            d_model: 256,
            n_heads: 4,
            d_ffn: 512,
            dropout: 0.1,
            max_positions: 256,
            allow_uneven_heads: false,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        positive(&[
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("max_positions", self.max_positions),
        ])?;
        probability("dropout", self.dropout)?;
        if self.n_heads > self.d_model {
            return Err(ModelError::InvalidConfig(format!(
                "{} heads exceed d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.d_model % self.n_heads != 0 && !self.allow_uneven_heads {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {} (allow_uneven_heads permits it)",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Per-head widths, e.g. 256 over 3 heads gives `[86, 85, 85]`.
    pub fn head_dims(&self) -> Vec<usize> {
        let base = self.d_model / self.n_heads;
        let extra = self.d_model % self.n_heads;
        (0..self.n_heads).map(|h| base + usize::from(h < extra)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub dropout: f64,
    pub bidirectional: bool,
    pub attention: bool,
}

impl Default for LstmConfig {
    fn default() -> Self {
        Self {
            embed_dim: 256,
            hidden_dim: 512,
            layers: 1,
            dropout: 0.2,
            bidirectional: false,
            attention: true,
        }
    }
}

impl LstmConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        positive(&[
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("layers", self.layers),
        ])?;
        probability("dropout", self.dropout)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub dim: usize,
    pub kernel_width: usize,
    pub dropout: f64,
    pub max_positions: usize,
}

impl Default for ConvConfig {
    fn default() -> Self {
        Self {
            enc_layers: 4,
            dec_layers: 4,
            dim: 256,
            kernel_width: 3,
            dropout: 0.1,
            max_positions: 256,
        }
    }
}

impl ConvConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        positive(&[
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("dim", self.dim),
            ("kernel_width", self.kernel_width),
            ("max_positions", self.max_positions),
        ])?;
        if self.kernel_width % 2 == 0 {
            return Err(ModelError::InvalidConfig(format!(
                "kernel_width {} must be odd",
                self.kernel_width
            )));
        }
        probability("dropout", self.dropout)
    }
}

/// Architecture plus its hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelConfig {
    /// Covers both `lstm` and `bilstm`, told apart by `bidirectional`.
    Lstm(LstmConfig),
    Conv(ConvConfig),
    Transformer(TransformerConfig),
}

impl ModelConfig {
    /// Defaults for an architecture.
    pub fn for_arch(arch: Arch) -> Self {
        match arch {
            Arch::Lstm => ModelConfig::Lstm(LstmConfig::default()),
            Arch::BiLstm => ModelConfig::Lstm(LstmConfig {
                bidirectional: true,
                ..LstmConfig::default()
            }),
            Arch::Conv => ModelConfig::Conv(ConvConfig::default()),
            Arch::Transformer => ModelConfig::Transformer(TransformerConfig::default()),
        }
    }

    pub fn arch(&self) -> Arch {
        match self {
            ModelConfig::Lstm(c) if c.bidirectional => Arch::BiLstm,
            ModelConfig::Lstm(_) => Arch::Lstm,
            ModelConfig::Conv(_) => Arch::Conv,
            ModelConfig::Transformer(_) => Arch::Transformer,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            ModelConfig::Lstm(c) => c.validate(),
            ModelConfig::Conv(c) => c.validate(),
            ModelConfig::Transformer(c) => c.validate(),
        }
    }

    pub fn dropout(&self) -> f64 {
        match self {
            ModelConfig::Lstm(c) => c.dropout,
            ModelConfig::Conv(c) => c.dropout,
            ModelConfig::Transformer(c) => c.dropout,
        }
    }

    pub fn set_dropout(&mut self, p: f64) {
        match self {
            ModelConfig::Lstm(c) => c.dropout = p,
            ModelConfig::Conv(c) => c.dropout = p,
            ModelConfig::Transformer(c) => c.dropout = p,
        }
    }

    /// Flat `key=value` form used in checkpoints and run snapshots.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = vec![("arch".to_string(), self.arch().name().to_string())];
        let mut put = |k: &str, v: String| out.push((format!("model.{k}"), v));
        match self {
            ModelConfig::Lstm(c) => {
                put("embed_dim", c.embed_dim.to_string());
                put("hidden_dim", c.hidden_dim.to_string());
                put("layers", c.layers.to_string());
                put("dropout", c.dropout.to_string());
                put("attention", c.attention.to_string());
            }
            ModelConfig::Conv(c) => {
                put("enc_layers", c.enc_layers.to_string());
                put("dec_layers", c.dec_layers.to_string());
                put("dim", c.dim.to_string());
                put("kernel_width", c.kernel_width.to_string());
                put("dropout", c.dropout.to_string());
                put("max_positions", c.max_positions.to_string());
            }
            ModelConfig::Transformer(c) => {
                put("enc_layers", c.enc_layers.to_string());
                put("dec_layers", c.dec_layers.to_string());
                put("d_model", c.d_model.to_string());
                put("n_heads", c.n_heads.to_string());
                put("d_ffn", c.d_ffn.to_string());
                put("dropout", c.dropout.to_string());
                put("max_positions", c.max_positions.to_string());
                put("allow_uneven_heads", c.allow_uneven_heads.to_string());
            }
        }
        out
    }

    /// Starts from the architecture defaults named by `arch` and applies
    /// every `model.*` key found through `get`.
    pub fn from_lookup(get: &dyn Fn(&str) -> Option<String>) -> Result<Self, ModelError> {
        let arch: Arch = get("arch")
            .ok_or_else(|| ModelError::InvalidConfig("missing arch".into()))?
            .parse()?;
        let mut config = ModelConfig::for_arch(arch);
        let key = |k: &str| get(&format!("model.{k}"));
        match &mut config {
            ModelConfig::Lstm(c) => {
                set(&key, "embed_dim", &mut c.embed_dim)?;
                set(&key, "hidden_dim", &mut c.hidden_dim)?;
                set(&key, "layers", &mut c.layers)?;
                set(&key, "dropout", &mut c.dropout)?;
                set(&key, "attention", &mut c.attention)?;
            }
            ModelConfig::Conv(c) => {
                set(&key, "enc_layers", &mut c.enc_layers)?;
                set(&key, "dec_layers", &mut c.dec_layers)?;
                set(&key, "dim", &mut c.dim)?;
                set(&key, "kernel_width", &mut c.kernel_width)?;
                set(&key, "dropout", &mut c.dropout)?;
                set(&key, "max_positions", &mut c.max_positions)?;
            }
            ModelConfig::Transformer(c) => {
                set(&key, "enc_layers", &mut c.enc_layers)?;
                set(&key, "dec_layers", &mut c.dec_layers)?;
                set(&key, "d_model", &mut c.d_model)?;
                set(&key, "n_heads", &mut c.n_heads)?;
                set(&key, "d_ffn", &mut c.d_ffn)?;
                set(&key, "dropout", &mut c.dropout)?;
                set(&key, "max_positions", &mut c.max_positions)?;
                set(&key, "allow_uneven_heads", &mut c.allow_uneven_heads)?;
            }
        }
        config.validate()?;
        Ok(config)
    }
}

fn set<T: FromStr>(get: &dyn Fn(&str) -> Option<String>, name: &str, slot: &mut T) -> Result<(), ModelError> {
    if let Some(raw) = get(name) {
        *slot = raw
            .trim()
            .parse()
            .map_err(|_| ModelError::InvalidConfig(format!("bad value {raw:?} for model.{name}")))?;
    }
    Ok(())
}

fn positive(fields: &[(&str, usize)]) -> Result<(), ModelError> {
    match fields.iter().find(|(_, v)| *v == 0) {
        Some((name, _)) => Err(ModelError::InvalidConfig(format!("{name} must be positive"))),
        None => Ok(()),
    }
}

fn probability(name: &str, p: f64) -> Result<(), ModelError> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(ModelError::InvalidConfig(format!("{name} must lie in [0, 1), got {p}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn head_divisibility() {
        let mut c = TransformerConfig {
            n_heads: 3,
            ..TransformerConfig::default()
        };
        assert!(c.validate().is_err());
        c.allow_uneven_heads = true;
        c.validate().unwrap();
        assert_eq!(c.head_dims(), [86, 85, 85]);
        assert_eq!(TransformerConfig::default().head_dims(), [64; 4]);
    }

    #[test]
    fn conv_kernel_must_be_odd() {
        let c = ConvConfig {
            kernel_width: 4,
            ..ConvConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn pairs_round_trip() {
        for arch in Arch::ALL {
            let mut config = ModelConfig::for_arch(arch);
            config.set_dropout(0.25);
            let map: HashMap<String, String> = config.to_pairs().into_iter().collect();
            let back = ModelConfig::from_lookup(&|k| map.get(k).cloned()).unwrap();
            assert_eq!(back, config);
            assert_eq!(back.arch(), arch);
        }
    }
}
