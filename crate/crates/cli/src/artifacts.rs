//! File plumbing for the CLI: typed JSON/CSV loading with usage-friendly
//! errors, the analysis lock file (manifest + audit chain), and the
//! retained-space document that carries everything a forecast needs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use emuchain_core::calibration::{Observation, RetainedSpace};
use emuchain_core::discrepancy::DiscrepancySpec;
use emuchain_core::emulator::{Emulator, EmulatorDoc};
use emuchain_core::ledger::{sha256_hex, AuditChain, Manifest};
use emuchain_core::report::write_atomic;
use emuchain_core::Error as CoreError;

/// CLI failures split by exit code: usage problems (missing files, bad
/// flags) exit 2; domain errors from the analysis itself exit 1 with a
/// structured JSON payload on stderr.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Domain(CoreError),
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Domain(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// What a successful command reports to the audit trail.
pub struct RunLog {
    pub operation: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
}

impl RunLog {
    pub fn new(operation: &str) -> Self {
        RunLog {
            operation: operation.to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed: None,
        }
    }

    pub fn input(&mut self, path: &Path) -> &mut Self {
        self.inputs.push(path.to_path_buf());
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.outputs.push(path.to_path_buf());
        self
    }
}

/// Read a file, treating absence as a usage error (the path is the
/// message), any other failure as a domain IO error.
pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Usage(format!("missing config file: {}", path.display()))
        } else {
            CliError::Domain(CoreError::Io {
                path: path.display().to_string(),
                source: e,
            })
        }
    })
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::Domain(CoreError::DocumentFormat {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    })
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| {
        CliError::Domain(CoreError::DocumentFormat {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    })?;
    text.push('\n');
    write_atomic(path, &text).map_err(CliError::Domain)
}

/// Hash artifact bytes for the audit trail; unreadable files hash as the
/// empty string so a missing input is visible rather than fatal.
pub fn hash_file(path: &Path) -> String {
    match fs::read(path) {
        Ok(bytes) => sha256_hex(&bytes),
        Err(_) => String::new(),
    }
}

pub fn hash_files(paths: &[PathBuf]) -> BTreeMap<String, String> {
    paths
        .iter()
        .map(|p| (p.display().to_string(), hash_file(p)))
        .collect()
}

pub const LOCK_FORMAT_VERSION: u32 = 1;

/// `analysis.lock.json`: the uncertainty manifest once one is built, plus
/// the append-only audit chain. Deserializing verifies the chain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LockFile {
    pub format_version: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub manifest: Option<Manifest>,
    #[serde(default)]
    pub chain: AuditChain,
}

impl Default for LockFile {
    fn default() -> Self {
        LockFile {
            format_version: LOCK_FORMAT_VERSION,
            manifest: None,
            chain: AuditChain::new(),
        }
    }
}

impl LockFile {
    /// Load the lock file, or start fresh when it doesn't exist yet.
    pub fn load_or_default(path: &Path) -> CliResult<LockFile> {
        if !path.exists() {
            return Ok(LockFile::default());
        }
        load_json(path)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        save_json(self, path)
    }
}

pub const RETAINED_FORMAT_VERSION: u32 = 1;

/// Everything a forecast needs in one document: the fitted emulators, the
/// discrepancy, the observations matched against, and the retained space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetainedDoc {
    pub format_version: u32,
    pub emulators: Vec<EmulatorDoc>,
    pub discrepancy: DiscrepancySpec,
    pub observations: Vec<Observation>,
    pub retained: RetainedSpace,
}

impl RetainedDoc {
    pub fn emulators(&self) -> CliResult<Vec<Emulator>> {
        self.emulators
            .iter()
            .map(|d| Emulator::from_doc(d).map_err(CliError::Domain))
            .collect()
    }
}

/// Simple CSV-of-numbers reader for decision grids: header of column
/// names, then f64 rows.
pub fn load_numeric_csv(path: &Path) -> CliResult<(Vec<String>, Vec<Vec<f64>>)> {
    let text = read_text(path)?;
    let bad = |reason: String| {
        CliError::Domain(CoreError::DocumentFormat {
            path: path.display().to_string(),
            reason,
        })
    };
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| bad("empty file".into()))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| bad(format!("row {i}: {e}")))?;
        if row.len() != header.len() {
            return Err(bad(format!(
                "row {i} has {} fields, header has {}",
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// Render a numeric CSV with shortest round-trip decimals.
pub fn render_numeric_csv(header: &[String], rows: &[Vec<f64>]) -> String {
    let mut text = header.join(",");
    text.push('\n');
    for row in rows {
        let fields: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        text.push_str(&fields.join(","));
        text.push('\n');
    }
    text
}

/// Split a `--sim` string on whitespace into command + args. Quoting is
/// not supported; wrap complex invocations in a script.
pub fn split_command(sim: &str) -> CliResult<(String, Vec<String>)> {
    let mut parts = sim.split_whitespace().map(|s| s.to_string());
    let command = parts
        .next()
        .ok_or_else(|| CliError::Usage("--sim is empty".into()))?;
    Ok((command, parts.collect()))
}
