//! Versioned JSON snapshot of a trained encoder and the config it was trained with.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::encoder::EncoderParams;
use crate::training::TrainConfig;

pub const SNAPSHOT_FORMAT: &str = "gyromix-model";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    pub params: EncoderParams,
}

impl Snapshot {
    pub fn new(config: TrainConfig, params: EncoderParams) -> Self {
        Self {
            format: SNAPSHOT_FORMAT.to_string(),
            version: SNAPSHOT_VERSION,
            config,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        // check the header before the full schema so version errors are clear
        let head: serde_json::Value = serde_json::from_str(text)?;
        let format = head.get("format").and_then(|v| v.as_str()).unwrap_or("");
        if format != SNAPSHOT_FORMAT {
            return Err(Error::Snapshot(format!("format `{format}` is not `{SNAPSHOT_FORMAT}`")));
        }
        let version = head.get("version").and_then(|v| v.as_u64());
        if version != Some(SNAPSHOT_VERSION as u64) {
            return Err(Error::Snapshot(format!(
                "version {version:?} does not match supported version {SNAPSHOT_VERSION}"
            )));
        }
        let snap: Snapshot = serde_json::from_value(head)?;
        snap.params.validate()?;
        Ok(snap)
    }
}
