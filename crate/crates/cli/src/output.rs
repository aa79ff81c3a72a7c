//! Result files: JSON documents, CSV tables and the run manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// One row of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub method: String,
    pub target: String,
    /// Original labels of the evaluation point, comma separated.
    pub z0: String,
    pub point: f64,
    pub se: Option<f64>,
    pub level: f64,
    pub ci_lo: Option<f64>,
    pub ci_hi: Option<f64>,
    /// The MSM is a working model here: the estimate targets its best
    /// linear approximation.
    pub approximation: bool,
    /// Penalties of the arm fits behind the estimate (1 treated, 0
    /// untreated); empty where the method has none or the arm is unused.
    pub lambda_ps1: Option<f64>,
    pub lambda_or1: Option<f64>,
    pub lambda_ps0: Option<f64>,
    pub lambda_or0: Option<f64>,
    /// Some fitted propensity hit the overlap floor.
    pub pi_clamped: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputInfo {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub input: Option<InputInfo>,
}

impl Manifest {
    pub fn new(command: &str, config: &impl Serialize, seed: u64, input: Option<InputInfo>) -> CliResult<Self> {
        Ok(Manifest {
            tool: "cste".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config: serde_json::to_value(config)?,
            seeds: BTreeMap::from([("seed".to_string(), seed)]),
            input,
        })
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::config("cli.manifest", format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::config("cli.manifest", format!("{}: {e}", path.display())))
    }

    /// Configuration recorded for `command`.
    pub fn config_for<T: for<'de> Deserialize<'de>>(&self, command: &str) -> CliResult<T> {
        if self.command != command {
            return Err(CliError::config(
                "cli.manifest",
                format!("manifest records a {:?} run, not {command:?}", self.command),
            ));
        }
        serde_json::from_value(self.config.clone()).map_err(|e| CliError::config("cli.manifest", e.to_string()))
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::config("cli.input", format!("cannot read {}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root)
            .map_err(|e| CliError::config("cli.output", format!("cannot create {}: {e}", root.display())))?;
        Ok(OutDir { root: root.to_path_buf() })
    }

    fn write(&self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.root.join(name);
        fs::write(&path, bytes).map_err(|e| CliError::config("cli.output", format!("cannot write {}: {e}", path.display())))
    }

    pub fn json(&self, name: &str, value: &impl Serialize) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Writes serializable rows with a header; floats keep their shortest
    /// round-trip representation.
    pub fn csv<R: Serialize>(&self, name: &str, rows: &[R]) -> CliResult<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::config("cli.output", e.to_string()))?;
        self.write(name, &bytes)
    }
}

pub fn read_estimates(path: &Path) -> CliResult<Vec<EstimateRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(CliError::from)).collect()
}
