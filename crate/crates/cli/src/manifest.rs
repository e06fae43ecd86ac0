use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::CliError;

/// Written next to every command's outputs. Feeding it back through
/// `--config` (or `PRIVFUSION_CONFIG`) reruns the command with the same settings.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: &'static str,
    pub config: Config,
    pub seeds: BTreeMap<String, u64>,
    /// SHA-256 of every input file.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<PathBuf>,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
}

pub struct ManifestBuilder {
    manifest: RunManifest,
    start: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, config: &Config) -> Self {
        Self {
            manifest: RunManifest {
                command: command.into(),
                tool_version: env!("CARGO_PKG_VERSION"),
                config: config.clone(),
                seeds: BTreeMap::new(),
                inputs: BTreeMap::new(),
                outputs: Vec::new(),
                started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
                wall_clock_secs: 0.0,
            },
            start: Instant::now(),
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) -> u64 {
        self.manifest.seeds.insert(name.into(), value);
        value
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::other(format!("{}: {e}", path.display())))?;
        self.manifest
            .inputs
            .insert(path.display().to_string(), hex::encode(Sha256::digest(&bytes)));
        Ok(())
    }

    /// Writes `contents` to `path` and records it.
    pub fn write(&mut self, path: PathBuf, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        std::fs::write(&path, contents).map_err(|e| CliError::other(format!("{}: {e}", path.display())))?;
        self.manifest.outputs.push(path);
        Ok(())
    }

    pub fn finish(mut self, dir: &Path) -> Result<PathBuf, CliError> {
        self.manifest.wall_clock_secs = self.start.elapsed().as_secs_f64();
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| CliError::other(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}
