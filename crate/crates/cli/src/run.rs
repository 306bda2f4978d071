//! Run directories: output files, the effective config and the provenance
//! record.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const CONFIG_FILE: &str = "config.toml";
pub const PROVENANCE_FILE: &str = "provenance.json";

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct Provenance {
    pub tool_version: &'static str,
    pub grammar_version: &'static str,
    pub severity_table_digest: String,
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub inputs: Vec<InputDigest>,
    pub timestamp_unix: u64,
}

pub struct Run {
    pub dir: PathBuf,
    pub config: RunConfig,
    command: String,
    inputs: Vec<PathBuf>,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Digest of a file, or of every file under a directory in path order.
fn digest_input(path: &Path) -> CliResult<String> {
    if path.is_file() {
        return sha256_file(path);
    }
    let mut h = Sha256::new();
    for entry in WalkDir::new(path).sort_by_file_name() {
        let entry = entry.map_err(|e| CliError::input("Io", e))?;
        if entry.file_type().is_file() {
            let rel = entry.path().strip_prefix(path).expect("under root");
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0]);
            h.update(sha256_file(entry.path())?.as_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

impl Run {
    pub fn create(dir: PathBuf, config: RunConfig, command: &str) -> CliResult<Self> {
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(Run { dir, config, command: command.to_string(), inputs: Vec::new() })
    }

    pub fn record_input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn write(&self, rel: &str, contents: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        std::fs::write(&p, contents).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> CliResult<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).expect("serializable output");
        text.push('\n');
        self.write(rel, text)
    }

    /// Writes the effective config and the provenance record.
    pub fn finish(self) -> CliResult<PathBuf> {
        let config_text = self.config.to_toml();
        self.write(CONFIG_FILE, &config_text)?;
        let inputs = self
            .inputs
            .iter()
            .map(|p| Ok(InputDigest { path: p.display().to_string(), sha256: digest_input(p)? }))
            .collect::<CliResult<Vec<_>>>()?;
        let prov = Provenance {
            tool_version: env!("CARGO_PKG_VERSION"),
            grammar_version: pvdiag::report::GRAMMAR_VERSION,
            severity_table_digest: self.config.corrupt.table.digest(),
            command: self.command.clone(),
            config_sha256: hex::encode(Sha256::digest(config_text.as_bytes())),
            seed: self.config.seed,
            inputs,
            timestamp_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        };
        self.write_json(PROVENANCE_FILE, &prov)?;
        Ok(self.dir)
    }
}
