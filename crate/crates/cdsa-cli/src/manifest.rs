//! Reproducibility manifest written next to every command's outputs, plus
//! the output guard that removes partial files when a command fails.

use anyhow::{bail, Context, Result};
use serde::Serialize;
use std::path::{Path, PathBuf};

/// FNV-1a 64-bit, hex-encoded. Stable and dependency-free; used to fingerprint
/// inputs and the effective configuration.
pub fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("hashing input {}", path.display()))?;
    Ok(fnv1a_hex(&bytes))
}

#[derive(Serialize)]
pub struct InputRecord {
    pub path: String,
    pub fnv64: String,
}

#[derive(Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_fnv64: String,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<String>,
    pub params: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, seed: u64, effective_config: &impl Serialize) -> Result<Manifest> {
        let cfg_json = serde_json::to_string(effective_config)?;
        Ok(Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_fnv64: fnv1a_hex(cfg_json.as_bytes()),
            inputs: Vec::new(),
            outputs: Vec::new(),
            params: serde_json::Value::Null,
        })
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(InputRecord {
            path: path.display().to_string(),
            fnv64: hash_file(path)?,
        });
        Ok(())
    }
}

/// Tracks files written by a command; anything not committed is removed on
/// drop, so failures leave no partial outputs behind.
pub struct OutputGuard {
    dir: PathBuf,
    written: Vec<PathBuf>,
    committed: bool,
    force: bool,
}

impl OutputGuard {
    pub fn new(dir: &Path, force: bool) -> Result<OutputGuard> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(OutputGuard {
            dir: dir.to_path_buf(),
            written: Vec::new(),
            committed: false,
            force,
        })
    }

    /// Reserves an output path, refusing to overwrite without `--force`.
    pub fn target(&mut self, name: &str) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if path.exists() && !self.force {
            bail!(
                "output {} already exists; pass --force to overwrite",
                path.display()
            );
        }
        self.written.push(path.clone());
        Ok(path)
    }

    /// Writes the manifest and marks the run successful.
    pub fn commit(mut self, mut manifest: Manifest) -> Result<()> {
        manifest.outputs = self
            .written
            .iter()
            .map(|p| p.display().to_string())
            .collect();
        let path = self.dir.join("manifest.json");
        manifest.outputs.push(path.display().to_string());
        let body = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, body)?;
        self.committed = true;
        Ok(())
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if !self.committed {
            for path in &self.written {
                let _ = std::fs::remove_file(path);
            }
        }
    }
}
