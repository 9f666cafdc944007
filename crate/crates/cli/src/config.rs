use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use pcjscc::baseline::BaselineConfig;
use pcjscc::metrics::MetricsConfig;
use pcjscc::training::{EvalConfig, TrainConfig};
use pcjscc::Error;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug)]
pub enum CliError {
    /// Exit code 2.
    Config(String),
    /// Exit code 3.
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

pub fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Parsed configuration with the raw bytes it came from.
pub struct Loaded<T> {
    pub value: T,
    pub raw: Vec<u8>,
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<Loaded<T>, CliError> {
    let raw = fs::read(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let value = serde_json::from_slice(&raw)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(Loaded { value, raw })
}

pub fn require_dir(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

pub fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainJob {
    pub dataset: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepJob {
    /// Checkpoint manifest written by `train`.
    pub model: PathBuf,
    pub dataset: PathBuf,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Adds the digital baseline to the sweep when present.
    #[serde(default)]
    pub baseline: Option<BaselineConfig>,
    /// Evaluate only the first `limit` clouds.
    #[serde(default)]
    pub limit: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineJob {
    pub dataset: PathBuf,
    pub snr_db: Vec<f64>,
    #[serde(default)]
    pub baseline: BaselineConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub limit: Option<usize>,
}

fn zero() -> f64 {
    0.0
}

fn ten() -> f64 {
    10.0
}

fn sixteen() -> u32 {
    16
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateJob {
    pub dataset: PathBuf,
    pub eval_dataset: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "zero")]
    pub refinement_snr_db: f64,
    #[serde(default = "ten")]
    pub hybrid_snr_db: f64,
    #[serde(default = "sixteen")]
    pub quant_bits: u32,
    #[serde(default)]
    pub limit: Option<usize>,
}

/// Relative paths in a configuration are taken from the file's directory.
pub fn resolve(config: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        config.parent().unwrap_or(Path::new("")).join(path)
    }
}
