use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;
pub const EXIT_STATS: u8 = 4;

/// Root for outputs when `--out` is not given.
pub const OUT_ROOT_ENV: &str = "FEDAU_OUT";

/// A message paired with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self::new(EXIT_FAILURE, format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<fedau::Error> for Failure {
    fn from(err: fedau::Error) -> Self {
        use fedau::Error as E;
        let code = match &err {
            E::Config(_) | E::Json(_) | E::Contract(_) | E::Domain(_) => EXIT_CONFIG,
            E::Diverged { .. } => EXIT_DIVERGED,
            _ => EXIT_FAILURE,
        };
        Self::new(code, err.to_string())
    }
}

/// Raw bytes of a config file and their SHA-256 digest in hex.
pub fn read_config(path: &Path) -> Result<(fedau::ExperimentConfig, String), Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::new(EXIT_CONFIG, format!("cannot read {}: {e}", path.display())))?;
    let digest = hex::encode(Sha256::digest(&bytes));
    let cfg = fedau::ExperimentConfig::load(path)?;
    Ok((cfg, digest))
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Failure::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::new(EXIT_FAILURE, e.to_string()))?;
    text.push('\n');
    write(path, text)
}

/// `--out` if given, else `$FEDAU_OUT/<config stem>`, else `runs/<config stem>`.
pub fn output_dir(explicit: Option<PathBuf>, config: &Path) -> PathBuf {
    if let Some(dir) = explicit {
        return dir;
    }
    let root = std::env::var_os(OUT_ROOT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    let stem = config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "experiment".into());
    root.join(stem)
}

/// Provenance lines shared by every CSV written for one run.
pub fn provenance(digest: &str, seed: u64, strategy: &str) -> Vec<String> {
    vec![format!("config_sha256={digest} seed={seed}"), format!("strategy={strategy}")]
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: PathBuf,
    pub config_sha256: String,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub strategies: Vec<String>,
    pub status: String,
    pub version: String,
    pub started_unix_ms: u128,
    pub elapsed_seconds: f64,
}

pub struct Clock {
    started: SystemTime,
}

impl Clock {
    pub fn start() -> Self {
        Self {
            started: SystemTime::now(),
        }
    }

    pub fn started_unix_ms(&self) -> u128 {
        self.started.duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
    }

    pub fn elapsed_seconds(&self) -> f64 {
        self.started.elapsed().map(|d| d.as_secs_f64()).unwrap_or(0.0)
    }
}
