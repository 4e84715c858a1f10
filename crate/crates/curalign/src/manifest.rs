//! Run manifests: each CLI command records what ran, with which config,
//! over which inputs (by content digest), and what it wrote.
//!
//! A manifest is written with status "running" before the work starts and
//! finalized afterwards, so a crash leaves a visible trace. Timestamps make
//! manifests the one output that is not byte-reproducible across runs;
//! reproducibility checks must compare the data files instead.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Result;

pub fn sha256_bytes(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_bytes(&fs::read(path)?))
}

fn now_unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    pub status: RunStatus,
    pub started_unix_ms: u64,
    pub finished_unix_ms: Option<u64>,
    pub wall_clock_ms: Option<u64>,
    /// Snapshot of the effective config, whatever shape the command uses.
    pub config: serde_json::Value,
    /// Input path to content digest.
    pub inputs: BTreeMap<String, String>,
    /// Files the command wrote, relative to its output directory.
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunManifest {
    pub fn begin(command: &str, config: serde_json::Value) -> RunManifest {
        RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            status: RunStatus::Running,
            started_unix_ms: now_unix_ms(),
            finished_unix_ms: None,
            wall_clock_ms: None,
            config,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            error: None,
        }
    }

    /// Digests the file and records it under its display path.
    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    fn finish(&mut self, status: RunStatus) {
        let now = now_unix_ms();
        self.finished_unix_ms = Some(now);
        self.wall_clock_ms = Some(now.saturating_sub(self.started_unix_ms));
        self.status = status;
    }

    pub fn finish_ok(&mut self, outputs: Vec<String>) {
        self.outputs = outputs;
        self.finish(RunStatus::Ok);
    }

    pub fn finish_error(&mut self, message: &str) {
        self.error = Some(message.to_string());
        self.finish(RunStatus::Error);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}
