//! Run configuration file: encoder settings, removal spec, and data paths.
//! Unknown keys are rejected; command-line flags override file values.

use anyhow::{Context, Result};
use cdsa_core::data::MissingSpec;
use cdsa_core::model::EncoderConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub missing: Option<MissingSpec>,
    pub cube: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let body = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&body)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.encoder.validate()?;
        Ok(cfg)
    }
}
