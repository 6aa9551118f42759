//! Per-run manifest: resolved configuration, input hashes and timings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub threads: usize,
    pub strict_deterministic: bool,
    /// Every setting the run used, defaults included.
    pub config: serde_json::Value,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<String>,
    /// Run outcomes such as solver iterations or final loss.
    pub results: BTreeMap<String, serde_json::Value>,
    /// Wall-clock seconds per phase; empty in strict-deterministic runs.
    pub timings_s: BTreeMap<String, f64>,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::file(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Collects manifest entries while a subcommand runs.
#[derive(Debug)]
pub struct Recorder {
    manifest: RunManifest,
    started: Instant,
    phase: Option<(String, Instant)>,
}

impl Recorder {
    pub fn new(subcommand: &str, argv: Vec<String>, seed: u64, threads: usize, strict: bool) -> Self {
        Self {
            manifest: RunManifest {
                subcommand: subcommand.into(),
                version: env!("CARGO_PKG_VERSION").into(),
                argv,
                seed,
                threads,
                strict_deterministic: strict,
                config: serde_json::Value::Null,
                inputs: Vec::new(),
                outputs: Vec::new(),
                results: BTreeMap::new(),
                timings_s: BTreeMap::new(),
            },
            started: Instant::now(),
            phase: None,
        }
    }

    pub fn config(&mut self, cfg: &impl Serialize) -> CliResult<()> {
        self.manifest.config = serde_json::to_value(cfg)?;
        Ok(())
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        let sha256 = sha256_file(path)?;
        self.manifest.inputs.push(InputHash { path: path.display().to_string(), sha256 });
        Ok(())
    }

    /// Records an input whose hash was computed elsewhere.
    pub fn hashed_input(&mut self, path: &Path, sha256: String) {
        self.manifest.inputs.push(InputHash { path: path.display().to_string(), sha256 });
    }

    pub fn output(&mut self, path: &Path) {
        self.manifest.outputs.push(path.display().to_string());
    }

    pub fn result(&mut self, key: &str, value: impl Serialize) -> CliResult<()> {
        self.manifest.results.insert(key.into(), serde_json::to_value(value)?);
        Ok(())
    }

    /// Ends the current phase (if any) and starts timing `name`.
    pub fn phase(&mut self, name: &str) {
        self.end_phase();
        self.phase = Some((name.to_string(), Instant::now()));
    }

    fn end_phase(&mut self) {
        if let Some((name, t)) = self.phase.take() {
            *self.manifest.timings_s.entry(name).or_default() += t.elapsed().as_secs_f64();
        }
    }

    /// Finalizes timings and writes the manifest atomically.
    pub fn finish(mut self, path: &Path) -> CliResult<RunManifest> {
        self.end_phase();
        if self.manifest.strict_deterministic {
            self.manifest.timings_s.clear();
        } else {
            self.manifest.timings_s.insert("total".into(), self.started.elapsed().as_secs_f64());
        }
        let bytes = serde_json::to_vec_pretty(&self.manifest)?;
        write_atomic(path, &bytes)?;
        Ok(self.manifest)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::file(dir, e))?;
    }
    qsm_core::io::write_atomic(path, bytes).map_err(|e| CliError::file(path, e))
}

/// Default manifest location next to a file output.
pub fn beside(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}
