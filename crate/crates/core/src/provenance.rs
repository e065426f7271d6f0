use serde::{Deserialize, Serialize};

/// Identifies how an artifact was produced.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    /// Hex digest of the effective configuration.
    pub config_hash: String,
    pub version: String,
}

impl Provenance {
    pub fn new(seed: u64, config_hash: impl Into<String>) -> Self {
        Provenance {
            seed,
            config_hash: config_hash.into(),
            version: version().to_string(),
        }
    }
}

/// Crate version plus the build's git description when one was supplied.
pub fn version() -> &'static str {
    match option_env!("UNLEARN_GIT_DESCRIBE") {
        Some(v) if !v.is_empty() => v,
        _ => concat!("v", env!("CARGO_PKG_VERSION")),
    }
}
