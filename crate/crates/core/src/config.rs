//! The run configuration shared by every pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::CorpusSpec;
use crate::error::{Error, Result};
use crate::evaluator::EvalConfig;
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::trainer::{MemorizeConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus: "runs/corpus.jsonl".into(),
            checkpoints: "runs/checkpoints".into(),
            reports: "runs/reports".into(),
        }
    }
}

impl Paths {
    /// All paths re-rooted under `dir`.
    pub fn under(dir: &Path) -> Self {
        Paths {
            corpus: dir.join("corpus.jsonl"),
            checkpoints: dir.join("checkpoints"),
            reports: dir.join("reports"),
        }
    }

    pub fn target_checkpoint(&self) -> PathBuf {
        self.checkpoints.join("target")
    }

    pub fn epoch_checkpoint(&self, tag: &str, epoch: usize) -> PathBuf {
        self.checkpoints.join(format!("{tag}-epoch{epoch:03}"))
    }
}

/// Grid for the hyperparameter sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub gammas: Vec<f64>,
    pub deltas: Vec<f64>,
    pub ranks: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Drop the cell with γ = δ = 0 (plain NPO).
    pub skip_unregularized: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            gammas: vec![0.0, 1.0],
            deltas: vec![0.0, 0.5, 1.0],
            ranks: vec![5],
            seeds: vec![0, 1, 2, 3, 4],
            skip_unregularized: true,
        }
    }
}

impl SweepConfig {
    pub fn cells(&self) -> Vec<crate::trainer::SweepCell> {
        let mut out = Vec::new();
        for &rank in &self.ranks {
            for &gamma in &self.gammas {
                for &delta in &self.deltas {
                    if self.skip_unregularized && gamma == 0.0 && delta == 0.0 {
                        continue;
                    }
                    out.push(crate::trainer::SweepCell { gamma, delta, rank });
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub model: ModelConfig,
    pub memorize: MemorizeConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub corpus: CorpusSpec,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    /// Every invariant of every section; messages start with the field path.
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.model.violations();
        v.extend(self.memorize.violations());
        v.extend(self.train.violations());
        v.extend(self.loss.violations());
        v.extend(self.corpus.violations());
        if self.sweep.gammas.is_empty() || self.sweep.deltas.is_empty() || self.sweep.ranks.is_empty() {
            v.push("SweepConfig: gammas, deltas and ranks must be nonempty".into());
        }
        if self.sweep.seeds.is_empty() {
            v.push("SweepConfig.seeds: must be nonempty".into());
        }
        for &g in &self.sweep.gammas {
            if !(g.is_finite() && g >= 0.0) {
                v.push(format!("SweepConfig.gammas: {g} must be >= 0"));
            }
        }
        for &d in &self.sweep.deltas {
            if !(d.is_finite() && d >= 0.0) {
                v.push(format!("SweepConfig.deltas: {d} must be >= 0"));
            }
        }
        for &r in &self.sweep.ranks {
            if r == 0 || r > self.model.model_dim {
                v.push(format!("SweepConfig.ranks: {r} must be in 1..={}", self.model.model_dim));
            }
        }
        for (name, p) in [
            ("Paths.corpus", &self.paths.corpus),
            ("Paths.checkpoints", &self.paths.checkpoints),
            ("Paths.reports", &self.paths.reports),
        ] {
            if p.as_os_str().is_empty() {
                v.push(format!("{name}: must be nonempty"));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Hex SHA-256 of the configuration's canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        assert_eq!(RunConfig::default().violations(), Vec::<String>::new());
    }

    #[test]
    fn violations_name_field_paths() {
        let mut c = RunConfig::default();
        c.loss.beta = 0.0;
        c.model.lora_rank = c.model.model_dim + 1;
        let v = c.violations();
        assert!(v.iter().any(|m| m.starts_with("LossConfig.beta")));
        assert!(v.iter().any(|m| m.starts_with("ModelConfig.lora_rank")));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.loss.delta = 0.0;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn default_sweep_grid_has_five_cells() {
        assert_eq!(SweepConfig::default().cells().len(), 5);
    }
}
