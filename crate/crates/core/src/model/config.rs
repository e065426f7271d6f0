use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Attention projection that can carry a LoRA pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
    O,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Q, Projection::K, Projection::V, Projection::O];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
        }
    }
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Projection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "q" => Ok(Projection::Q),
            "k" => Ok(Projection::K),
            "v" => Ok(Projection::V),
            "o" => Ok(Projection::O),
            other => Err(format!("unknown projection {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_targets: Vec<Projection>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: crate::corpus::VOCAB_SIZE,
            model_dim: 64,
            n_layers: 2,
            n_heads: 4,
            context_len: 128,
            lora_rank: 5,
            lora_alpha: 5.0,
            lora_targets: Projection::ALL.to_vec(),
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.model_dim
    }

    /// The LoRA scaling factor `α / r`.
    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    pub fn targets(&self, p: Projection) -> bool {
        self.lora_targets.contains(&p)
    }

    /// Every violated invariant, each naming its field path.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let f = |name: &str, msg: &str| format!("ModelConfig.{name}: {msg}");
        if self.vocab_size == 0 {
            v.push(f("vocab_size", "must be at least 1"));
        }
        if self.model_dim == 0 {
            v.push(f("model_dim", "must be at least 1"));
        }
        if self.n_layers == 0 {
            v.push(f("n_layers", "must be at least 1"));
        }
        if self.n_heads == 0 {
            v.push(f("n_heads", "must be at least 1"));
        } else if !self.model_dim.is_multiple_of(self.n_heads) {
            v.push(f("n_heads", "model_dim must be divisible by n_heads"));
        }
        if self.context_len == 0 {
            v.push(f("context_len", "must be at least 1"));
        }
        if self.lora_rank == 0 {
            v.push(f("lora_rank", "must be at least 1"));
        } else if self.lora_rank > self.model_dim {
            v.push(f("lora_rank", "must not exceed model_dim"));
        }
        if !(self.lora_alpha > 0.0 && self.lora_alpha.is_finite()) {
            v.push(f("lora_alpha", "must be positive"));
        }
        let mut seen = self.lora_targets.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.lora_targets.len() {
            v.push(f("lora_targets", "duplicate projection"));
        }
        v
    }

    pub fn validate(&self) -> crate::Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(crate::Error::Config(v))
        }
    }
}
