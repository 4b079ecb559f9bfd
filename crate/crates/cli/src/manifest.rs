//! The record written next to every command's outputs.

use std::fs;
use std::path::Path;

use anyhow::Context;
use mft_core::data::SCENE_MAGIC;
use mft_core::train::CHECKPOINT_MAGIC;
use serde::{Deserialize, Serialize};

use crate::args::Command;

pub const RUN_MAGIC: &str = "MFTRUN1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub magic: String,
    pub tool_version: String,
    pub scene_format: String,
    pub checkpoint_format: String,
    pub invocation: Command,
    /// Configuration derived from the flags and inputs (model and optimizer
    /// settings, generator settings).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved: Option<serde_json::Value>,
}

impl RunManifest {
    pub fn new(invocation: Command, resolved: Option<serde_json::Value>) -> Self {
        RunManifest {
            magic: RUN_MAGIC.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            scene_format: SCENE_MAGIC.into(),
            checkpoint_format: CHECKPOINT_MAGIC.into(),
            invocation,
            resolved,
        }
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let m: RunManifest = serde_json::from_str(&text)
            .map_err(mft_core::MftError::from)
            .with_context(|| format!("parsing {}", path.display()))?;
        if m.magic != RUN_MAGIC {
            return Err(mft_core::MftError::Format(format!("{} is not a run manifest", path.display())).into());
        }
        Ok(m)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(mft_core::MftError::from)?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))?;
    Ok(())
}

pub fn io_err(path: &Path, source: std::io::Error) -> mft_core::MftError {
    mft_core::MftError::Io {
        path: path.display().to_string(),
        source,
    }
}
