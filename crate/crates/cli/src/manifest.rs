//! One JSON record per invocation, written next to the command's output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::error::CliError;

pub const VERSION: &str = env!("TFN_VERSION");

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    /// Digests, metric summaries and warnings.
    pub notes: BTreeMap<String, Value>,
    pub started_at: String,
    pub finished_at: String,
}

impl RunManifest {
    pub fn start(command: &str, seed: u64, config: Value) -> Self {
        RunManifest {
            command: command.into(),
            version: VERSION.into(),
            seed,
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            notes: BTreeMap::new(),
            started_at: now(),
            finished_at: String::new(),
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs.insert(name.into(), path.display().to_string());
    }

    pub fn output(&mut self, name: &str, path: &Path) {
        self.outputs.insert(name.into(), path.display().to_string());
    }

    pub fn note(&mut self, name: &str, v: impl Serialize) {
        self.notes.insert(name.into(), serde_json::to_value(v).expect("note serializes"));
    }

    /// Stamps the end time and writes `<out>.manifest.json` beside `out`.
    pub fn finish(mut self, out: &Path) -> Result<PathBuf, CliError> {
        self.finished_at = now();
        let path = manifest_path(out);
        let json = serde_json::to_string_pretty(&self).expect("manifest serializes");
        fs::write(&path, json + "\n").map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Sibling path so output directories stay free of run metadata.
pub fn manifest_path(out: &Path) -> PathBuf {
    let name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    out.with_file_name(format!("{name}.manifest.json"))
}
