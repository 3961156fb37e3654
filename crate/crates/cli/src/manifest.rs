//! Run manifests: a JSON record of what a command did, written next to its
//! outputs so a result can be traced back to exact inputs and settings.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

/// One hashed file reference.
#[derive(Debug, Clone, Serialize)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

/// Everything needed to reproduce or audit a run. Settings hold the fully
/// resolved values (after flag/config/default precedence), not the raw argv.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub settings: BTreeMap<String, String>,
    pub seed: u64,
    pub inputs: Vec<FileRef>,
    pub outputs: Vec<FileRef>,
    pub duration_secs: f64,
    #[serde(skip)]
    started: Instant,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        RunManifest {
            command: command.into(),
            settings: BTreeMap::new(),
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            duration_secs: 0.0,
            started: Instant::now(),
        }
    }

    pub fn setting(&mut self, key: &str, value: impl ToString) {
        self.settings.insert(key.into(), value.to_string());
    }

    pub fn setting_opt(&mut self, key: &str, value: Option<impl ToString>) {
        let rendered = match value {
            Some(v) => v.to_string(),
            None => "none".into(),
        };
        self.settings.insert(key.into(), rendered);
    }

    /// Record an input file that has already been read successfully.
    pub fn input(&mut self, path: &str, bytes: &[u8]) {
        self.inputs.push(FileRef {
            path: path.into(),
            sha256: sha256_hex(bytes),
        });
    }

    /// Record an output file that has already been written.
    pub fn output(&mut self, path: &str, bytes: &[u8]) {
        self.outputs.push(FileRef {
            path: path.into(),
            sha256: sha256_hex(bytes),
        });
    }

    /// Serialize with the final duration and write to `path`. The manifest
    /// itself is the one output that cannot carry its own hash.
    pub fn write(mut self, path: &str) -> Result<(), CliError> {
        self.duration_secs = self.started.elapsed().as_secs_f64();
        let body = serde_json::to_string_pretty(&self)
            .map_err(|e| CliError::Runtime(format!("manifest serialization failed: {e}")))?;
        crate::util::write_output(path, body.as_bytes())
    }

    /// Write to `path` when given; otherwise log one JSON line to stderr so
    /// commands without an output directory still leave a trace.
    pub fn emit(mut self, path: Option<&str>) -> Result<(), CliError> {
        match path {
            Some(p) => self.write(p),
            None => {
                self.duration_secs = self.started.elapsed().as_secs_f64();
                let line = serde_json::to_string(&self).map_err(|e| {
                    CliError::Runtime(format!("manifest serialization failed: {e}"))
                })?;
                eprintln!("{line}");
                Ok(())
            }
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
