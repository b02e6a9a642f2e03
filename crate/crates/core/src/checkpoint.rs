//! Versioned model snapshots.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Standardization;
use crate::error::{Error, Result};
use crate::model::DgpModel;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Every parameter of a model, stored in constrained form so a round trip is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// layer string, e.g. `LV-GP-GP`
    pub spec: String,
    pub model: DgpModel,
    pub standardization: Standardization,
    pub seed: u64,
    /// optimizer steps taken
    pub step: usize,
    /// free-form run settings (data source, split, objective, ...)
    pub settings: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: DgpModel, standardization: Standardization, seed: u64, step: usize) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            spec: model.spec.to_string(),
            model,
            standardization,
            seed,
            step,
            settings: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Io(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Io(format!("checkpoint is not valid JSON: {e}")))?;
        let found = value.get("version").and_then(|v| v.as_u64()).ok_or_else(|| Error::Io("checkpoint has no version".into()))?;
        if found != u64::from(CHECKPOINT_VERSION) {
            return Err(Error::VersionMismatch { found: found.min(u64::from(u32::MAX)) as u32, expected: CHECKPOINT_VERSION });
        }
        let ck: Checkpoint = serde_json::from_value(value).map_err(|e| Error::Io(format!("malformed checkpoint: {e}")))?;
        ck.model.validate()?;
        if ck.model.spec.to_string() != ck.spec {
            return Err(Error::Config(format!("checkpoint spec `{}` does not match its layers", ck.spec)));
        }
        if ck.standardization.x_mean.len() != ck.model.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "standardization covers {} inputs, model expects {}",
                ck.standardization.x_mean.len(),
                ck.model.input_dim
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::FileNotFound(path.display().to_string()));
        }
        Checkpoint::from_json(&std::fs::read_to_string(path)?)
    }
}
