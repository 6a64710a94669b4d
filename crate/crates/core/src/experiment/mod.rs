//! Config-driven experiment runner: a fixed stage graph over a run
//! directory, with per-stage stamps so finished work is never redone.

mod config;
mod report;
mod stages;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{BtSettings, ExperimentConfig, KeyValues, SplitPaths};
pub use report::{collect_results, render_markdown, render_tsv, ResultRow};

/// Stage names in execution order.
pub const STAGES: [&str; 8] = ["prep", "bpe", "vocab", "binarize", "backtranslate", "train", "decode", "score"];

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{key} points to missing file {path}")]
    MissingPath { key: String, path: PathBuf },
    #[error("run directory {0} is locked by another experiment")]
    Locked(PathBuf),
    #[error("run name already used with a different config in {0}")]
    NameTaken(PathBuf),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: BoxError,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ExperimentError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// What a run did.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    /// Stages that did work, in order.
    pub executed: Vec<&'static str>,
    /// Stages whose stamped outputs were still fresh.
    pub skipped: Vec<&'static str>,
    pub bleu: f64,
}

/// Runs root: the explicit value, else `DMT_RUNS_DIR`, else `./runs`.
pub fn runs_root(explicit: Option<&Path>) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os("DMT_RUNS_DIR").map_or_else(|| PathBuf::from("runs"), PathBuf::from),
    }
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_hash(path: &Path) -> Result<String, ExperimentError> {
    let bytes = fs::read(path).map_err(|e| ExperimentError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Removes the lock file when the run ends, however it ends.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(run_dir: &Path) -> Result<Self, ExperimentError> {
        let path = run_dir.join("lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(ExperimentError::Locked(run_dir.into())),
            Err(e) => Err(ExperimentError::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Timestamped lines to stderr and `log.txt`.
pub(crate) struct RunLog {
    file: fs::File,
}

impl RunLog {
    fn open(path: &Path) -> Result<Self, ExperimentError> {
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| ExperimentError::io(path, e))?;
        Ok(Self { file })
    }

    pub(crate) fn line(&mut self, msg: &str) {
        let stamp = chrono::Utc::now().format("%Y-%m-%dT%H:%M:%S%.3fZ");
        let text = format!("{stamp} {msg}");
        eprintln!("{text}");
        let _ = writeln!(self.file, "{text}");
    }
}

/// Executes every stage of `config` under `runs_root/<name>`, skipping
/// stages whose stamped inputs and outputs are unchanged.
pub fn run_experiment(config: &ExperimentConfig, runs_root: &Path) -> Result<RunSummary, ExperimentError> {
    let run_dir = runs_root.join(&config.name);
    fs::create_dir_all(&run_dir).map_err(|e| ExperimentError::io(&run_dir, e))?;
    let _lock = RunLock::acquire(&run_dir)?;
    let snapshot = config.snapshot().to_text();
    let config_path = run_dir.join("config.txt");
    match fs::read_to_string(&config_path) {
        Ok(existing) if existing != snapshot => return Err(ExperimentError::NameTaken(run_dir)),
        Ok(_) => {}
        Err(_) => fs::write(&config_path, &snapshot).map_err(|e| ExperimentError::io(&config_path, e))?,
    }
    let mut log = RunLog::open(&run_dir.join("log.txt"))?;
    log.line(&format!("run {} ({} {})", config.name, config.system, config.pair()));
    let mut runner = stages::Runner::new(config, &run_dir, &mut log);
    let bleu = runner.run_all()?;
    let (executed, skipped) = (runner.executed.clone(), runner.skipped.clone());
    runner.write_manifest()?;
    log.line(&format!(
        "done: bleu {bleu:.4}; ran [{}], fresh [{}]",
        executed.join(", "),
        skipped.join(", ")
    ));
    Ok(RunSummary {
        run_dir,
        executed,
        skipped,
        bleu,
    })
}
