//! Checkpoint directory: `manifest.txt` (key = value lines) plus `weights.bin`
//! (all tensors as little-endian `f64`, concatenated in manifest order).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::model::{init_model, lora_values_mut, ModelConfig, ModelState, Projection};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const WEIGHTS_FILE: &str = "weights.bin";

/// A model state plus free-form metadata (provenance, epoch, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    pub meta: BTreeMap<String, String>,
}

fn config_lines(cfg: &ModelConfig) -> Vec<(String, String)> {
    let targets: Vec<&str> = cfg.lora_targets.iter().map(|p| p.name()).collect();
    vec![
        ("config.vocab_size".into(), cfg.vocab_size.to_string()),
        ("config.model_dim".into(), cfg.model_dim.to_string()),
        ("config.n_layers".into(), cfg.n_layers.to_string()),
        ("config.n_heads".into(), cfg.n_heads.to_string()),
        ("config.context_len".into(), cfg.context_len.to_string()),
        ("config.lora_rank".into(), cfg.lora_rank.to_string()),
        ("config.lora_alpha".into(), format!("{:?}", cfg.lora_alpha)),
        ("config.lora_targets".into(), targets.join(",")),
    ]
}

impl Checkpoint {
    pub fn new(state: ModelState) -> Self {
        Checkpoint {
            state,
            meta: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.meta.insert(key.into(), value.to_string());
        self
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        manifest.push_str(&format!("format_version = {FORMAT_VERSION}\n"));
        for (k, v) in config_lines(&self.state.config) {
            manifest.push_str(&format!("{k} = {v}\n"));
        }
        manifest.push_str(&format!("lora_attached = {}\n", self.state.lora.is_some()));
        manifest.push_str(&format!("lora_enabled = {}\n", self.state.lora_enabled));
        for (k, v) in &self.meta {
            if k.contains('\n') || v.contains('\n') || k.contains('=') {
                return Err(Error::Checkpoint(format!("metadata entry {k:?} not representable")));
            }
            manifest.push_str(&format!("meta.{k} = {v}\n"));
        }

        let mut blob = Vec::new();
        for (name, t) in self.state.named_tensors() {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let offset = blob.len();
            for x in t.data() {
                blob.extend_from_slice(&x.to_le_bytes());
            }
            manifest.push_str(&format!(
                "tensor.{name} = {} {offset} {}\n",
                dims.join("x"),
                blob.len() - offset
            ));
        }
        fs::write(dir.join(MANIFEST_FILE), manifest)?;
        fs::write(dir.join(WEIGHTS_FILE), blob)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = fs::read_to_string(dir.join(MANIFEST_FILE)).map_err(|e| {
            Error::Checkpoint(format!("cannot read {}: {e}", dir.join(MANIFEST_FILE).display()))
        })?;
        let blob = fs::read(dir.join(WEIGHTS_FILE)).map_err(|e| {
            Error::Checkpoint(format!("cannot read {}: {e}", dir.join(WEIGHTS_FILE).display()))
        })?;

        let mut fields = BTreeMap::new();
        let mut meta = BTreeMap::new();
        let mut tensors: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
        for (i, line) in manifest.lines().enumerate() {
            let line_no = i + 1;
            let parse_err = |msg: String| Error::Parse { line: line_no, msg };
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once(" = ")
                .ok_or_else(|| parse_err(format!("expected `key = value`, got {line:?}")))?;
            if let Some(name) = key.strip_prefix("tensor.") {
                let parts: Vec<&str> = value.split_whitespace().collect();
                let [dims, offset, len] = parts.as_slice() else {
                    return Err(parse_err(format!("bad tensor entry {value:?}")));
                };
                let shape = dims
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| parse_err(e.to_string()))?;
                let offset = offset.parse().map_err(|_| parse_err("bad offset".into()))?;
                let len = len.parse().map_err(|_| parse_err("bad length".into()))?;
                tensors.push((name.to_string(), shape, offset, len));
            } else if let Some(k) = key.strip_prefix("meta.") {
                meta.insert(k.to_string(), value.to_string());
            } else {
                fields.insert(key.to_string(), value.to_string());
            }
        }

        let get = |k: &str| {
            fields
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("manifest lacks {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("{k} is not an integer")))
        };
        let version: u32 = num("format_version")? as u32;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let targets = get("config.lora_targets")?;
        let lora_targets = if targets.is_empty() {
            Vec::new()
        } else {
            targets
                .split(',')
                .map(|s| s.parse::<Projection>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(Error::Checkpoint)?
        };
        let config = ModelConfig {
            vocab_size: num("config.vocab_size")?,
            model_dim: num("config.model_dim")?,
            n_layers: num("config.n_layers")?,
            n_heads: num("config.n_heads")?,
            context_len: num("config.context_len")?,
            lora_rank: num("config.lora_rank")?,
            lora_alpha: get("config.lora_alpha")?
                .parse()
                .map_err(|_| Error::Checkpoint("config.lora_alpha is not a number".into()))?,
            lora_targets,
        };
        let lora_enabled = get("lora_enabled")? == "true";

        let mut state = init_model(&config, 0)?;
        if get("lora_attached")? != "true" {
            state.lora = None;
        }
        state.lora_enabled = lora_enabled;

        let names: Vec<String> = state.named_tensors().into_iter().map(|(n, _)| n).collect();
        if names.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, manifest lists {}",
                names.len(),
                tensors.len()
            )));
        }
        let mut slots: Vec<&mut Tensor> = state.backbone.values_mut();
        if let Some(lora) = state.lora.as_mut() {
            slots.extend(lora_values_mut(lora));
        }
        for ((expected, slot), (name, shape, offset, len)) in names.iter().zip(slots).zip(&tensors) {
            if expected != name {
                return Err(Error::Checkpoint(format!("expected tensor {expected}, found {name}")));
            }
            if shape.as_slice() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {shape:?} does not match config shape {:?}",
                    slot.shape()
                )));
            }
            if *len != slot.numel() * 8 || offset + len > blob.len() {
                return Err(Error::Checkpoint(format!("{name}: byte range out of bounds")));
            }
            for (x, chunk) in slot
                .data_mut()
                .iter_mut()
                .zip(blob[*offset..offset + len].chunks_exact(8))
            {
                *x = f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        Ok(Checkpoint { state, meta })
    }
}
