//! Run provenance: every command writes a manifest recording what ran, the
//! fully resolved configuration, which files went in, and which files came
//! out — the outputs checksummed so a run can be audited later.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Size and SHA-256 of one produced file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    /// Path as it was written (not canonicalized, so manifests stay readable
    /// when runs use relative paths).
    pub path: String,
    /// File size in bytes.
    pub bytes: u64,
    /// Lowercase hex SHA-256 of the contents.
    pub sha256: String,
}

/// Provenance record for one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Which subcommand ran.
    pub command: String,
    /// The fully resolved configuration (file values with flag overrides
    /// applied), as generic JSON so the manifest never lags the config.
    pub config: serde_json::Value,
    /// Files the command read.
    pub inputs: Vec<String>,
    /// Files the command wrote, checksummed after writing.
    pub outputs: Vec<FileDigest>,
    /// Seed governing any randomized work in the run.
    pub seed: u64,
    /// RFC 3339 UTC timestamp taken when the command started.
    pub started_at: String,
    /// RFC 3339 UTC timestamp taken when the manifest was saved.
    pub finished_at: String,
}

fn now_rfc3339() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    /// Start a manifest; the clock is read immediately.
    pub fn begin(command: &str, config: serde_json::Value, seed: u64) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed,
            started_at: now_rfc3339(),
            finished_at: String::new(),
        }
    }

    /// Note a file the command read.
    pub fn record_input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    /// Digest a file the command wrote. Call after the file is complete.
    pub fn record_output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(sha256_file(path)?);
        Ok(())
    }

    /// Stamp the finish time and write pretty-printed JSON.
    pub fn save(&mut self, path: &Path) -> Result<()> {
        self.finished_at = now_rfc3339();
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Read a manifest back.
    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// Conventional manifest location for a single-file artifact:
/// `<file>.manifest.json` next to it.
pub fn manifest_path_for(artifact: &Path) -> PathBuf {
    let mut name = artifact
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "artifact".to_string());
    name.push_str(".manifest.json");
    artifact.with_file_name(name)
}

/// Stream a file through SHA-256.
pub fn sha256_file(path: &Path) -> Result<FileDigest> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut bytes = 0u64;
    let mut buffer = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buffer).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buffer[..n]);
        bytes += n as u64;
    }
    Ok(FileDigest {
        path: path.display().to_string(),
        bytes,
        sha256: hex::encode(hasher.finalize()),
    })
}

/// Write `text` to `path` through a buffered writer, creating parents.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    writer
        .write_all(text.as_bytes())
        .and_then(|_| writer.flush())
        .map_err(|e| Error::io(path, e))
}
