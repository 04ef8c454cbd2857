//! `manifest.json`: what a command was run with and what it wrote.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::commands::Job;
use crate::error::{CliError, CliResult};
use crate::files::{read_bytes, read_text, sha256_hex};

pub const RUN_MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

/// Written last by every command. Holds no timestamps or host details, so an
/// identical rerun yields an identical manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    #[serde(flatten)]
    pub job: Job,
    pub seeds: BTreeMap<String, u64>,
    /// As given on the command line or in the config.
    pub inputs: Vec<FileRecord>,
    /// Relative to the output directory, sorted.
    pub outputs: Vec<FileRecord>,
}

pub fn hash_inputs(paths: &[&Path]) -> CliResult<Vec<FileRecord>> {
    paths
        .iter()
        .map(|p| {
            Ok(FileRecord {
                path: p.display().to_string(),
                sha256: sha256_hex(&read_bytes(p)?),
            })
        })
        .collect()
}

impl RunManifest {
    pub fn read(path: &Path) -> CliResult<Self> {
        serde_json::from_str(&read_text(path)?)
            .map_err(|e| CliError::input("run_manifest", format!("not a run manifest: {e}")).at(path))
    }

    pub fn output(&self, rel: &str) -> Option<&FileRecord> {
        self.outputs.iter().find(|r| r.path == rel)
    }

    /// Re-hash the recorded inputs and report the first that changed.
    pub fn verify_inputs(&self) -> CliResult<()> {
        for rec in &self.inputs {
            let p = Path::new(&rec.path);
            let now = sha256_hex(&read_bytes(p)?);
            if now != rec.sha256 {
                return Err(CliError::input(
                    "input_changed",
                    format!("{} has sha256 {now}, the manifest recorded {}", rec.path, rec.sha256),
                ));
            }
        }
        Ok(())
    }
}
