//! Output-directory writer that records a content digest for every file it
//! produces, then stamps them into the run manifest.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use thermodepth::manifest::{sha256_hex, FileDigest, RunManifest};

use crate::errors::CliError;

pub struct OutputDir {
    base: PathBuf,
    digests: Vec<FileDigest>,
}

impl OutputDir {
    /// Open (creating if needed) the output directory. The parent must
    /// already exist.
    pub fn create(base: &Path) -> Result<Self, CliError> {
        if !base.exists() {
            std::fs::create_dir(base).map_err(|e| CliError::io(base, e))?;
        }
        Ok(Self {
            base: base.to_path_buf(),
            digests: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.base
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.base.join(name);
        std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.digests.push(FileDigest {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<(), CliError> {
        self.write_bytes(name, text.as_bytes())
    }

    /// Write the digest-bearing run manifest. `generated_at` is the single
    /// field reruns may differ in.
    pub fn finish(
        mut self,
        command: &str,
        seed: Option<u64>,
        config_echo: serde_json::Value,
        inputs: Vec<String>,
    ) -> Result<(), CliError> {
        self.digests.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            seed,
            config_echo,
            inputs,
            outputs: std::mem::take(&mut self.digests),
            generated_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        let json = serde_json::to_string_pretty(&manifest)?;
        let path = self.base.join("run_manifest.json");
        std::fs::write(&path, json).map_err(|e| CliError::io(&path, e))?;
        Ok(())
    }
}

pub fn read_to_string(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}
