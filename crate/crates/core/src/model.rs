//! Versioned JSON model file: policy, normalization constant and training config.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::policy::PolicySpec;
use crate::trainer::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u32,
    pub policy: PolicySpec,
    /// Mean raw instruct cost of the training data; evaluation data is
    /// normalized with this constant.
    pub instruct_cost_mean: f64,
    pub config: TrainConfig,
    /// sha256 of the config's JSON encoding.
    pub config_digest: String,
}

/// Lowercase hex sha256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn config_digest(config: &TrainConfig) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    sha256_hex(&json)
}

impl ModelFile {
    pub fn new(policy: PolicySpec, instruct_cost_mean: f64, config: TrainConfig) -> Self {
        ModelFile {
            format_version: FORMAT_VERSION,
            config_digest: config_digest(&config),
            policy,
            instruct_cost_mean,
            config,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Numeric(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: ModelFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Validation(format!(
                "unsupported model format version {}",
                m.format_version
            )));
        }
        if m.config_digest != config_digest(&m.config) {
            return Err(Error::Validation("model config digest does not match its config".into()));
        }
        if !(m.instruct_cost_mean > 0.0 && m.instruct_cost_mean.is_finite()) {
            return Err(Error::Validation("model normalization constant must be positive".into()));
        }
        Ok(m)
    }
}
