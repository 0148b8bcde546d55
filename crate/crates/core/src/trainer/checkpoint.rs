use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ScoreNormalizer, TrainConfig};
use crate::data::Setting;
use crate::{Error, Heads, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to score new windows: parameters (including BatchNorm
/// running statistics), hyperparameters, the score normaliser and the
/// setting the model was trained under.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub setting: Setting,
    pub seen_classes: BTreeSet<String>,
    pub heads: Heads,
    pub train_config: TrainConfig,
    pub normalizer: ScoreNormalizer,
    pub model: Model,
}

impl Checkpoint {
    pub fn new(
        model: Model,
        normalizer: ScoreNormalizer,
        train_config: TrainConfig,
        heads: Heads,
        setting: Setting,
        seen_classes: BTreeSet<String>,
    ) -> Self {
        Checkpoint { format_version: CHECKPOINT_VERSION, setting, seen_classes, heads, train_config, normalizer, model }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let probe: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        match probe.get("format_version").and_then(|v| v.as_u64()) {
            Some(v) if v == CHECKPOINT_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Checkpoint(format!(
                    "{}: format version {v} is not supported (expected {CHECKPOINT_VERSION})",
                    path.display()
                )))
            }
            None => return Err(Error::Checkpoint(format!("{}: missing format_version", path.display()))),
        }
        let ckpt: Checkpoint =
            serde_json::from_value(probe).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        ckpt.model.config.validate()?;
        Ok(ckpt)
    }
}
