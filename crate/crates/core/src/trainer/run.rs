//! Run directories: manifest, append-only logs, checkpoints.
//!
//! ```text
//! <root>/<config-hash[..12]>-s<seed>[-k]/
//!     manifest.json      written once before training
//!     config.toml
//!     log.jsonl          one record per batch and per epoch
//!     gmm.jsonl          one record per mixture fit, with per-sample losses
//!     checkpoints/       epoch_NNN.{bin,txt}, best.{bin,txt}
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{Result, SanmError};
use crate::gmm::GmmFit;
use crate::nn::checkpoint::Checkpoint;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: TrainConfig,
    pub config_hash: String,
    pub dataset: String,
    pub dataset_hash: String,
    pub train_samples: usize,
    pub test_samples: usize,
    pub noise: Option<serde_json::Value>,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub created_unix: u64,
}

impl RunManifest {
    pub fn new(
        config: &TrainConfig,
        train: &Dataset,
        test: Option<&Dataset>,
        noise: Option<serde_json::Value>,
        output_dir: &Path,
    ) -> Self {
        RunManifest {
            version: VERSION.to_string(),
            config: config.clone(),
            config_hash: config.hash(),
            dataset: train.name.clone(),
            dataset_hash: train.content_hash(),
            train_samples: train.len(),
            test_samples: test.map_or(0, Dataset::len),
            noise,
            seed: config.seed,
            output_dir: output_dir.to_path_buf(),
            created_unix: unix_now() as u64,
        }
    }
}

/// One line of the run log. `timestamp` is the only field that differs between
/// otherwise identical runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Batch {
        epoch: usize,
        batch: usize,
        phase: Phase,
        lr: f64,
        l_c: f64,
        l_r: f64,
        l_train: f64,
        timestamp: f64,
    },
    Epoch {
        epoch: usize,
        phase: Phase,
        lr: f64,
        l_c: f64,
        l_r: f64,
        l_train: f64,
        test_acc: Option<f64>,
        best_acc: Option<f64>,
        timestamp: f64,
    },
}

impl LogRecord {
    pub fn epoch(&self) -> usize {
        match self {
            LogRecord::Batch { epoch, .. } | LogRecord::Epoch { epoch, .. } => *epoch,
        }
    }

    /// The record with its timestamp zeroed, for reproducibility comparisons.
    pub fn body(&self) -> LogRecord {
        let mut r = self.clone();
        match &mut r {
            LogRecord::Batch { timestamp, .. } | LogRecord::Epoch { timestamp, .. } => *timestamp = 0.0,
        }
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Plain cross-entropy on unmasked images.
    Warmup,
    /// Masked training.
    Masked,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmRecord {
    pub epoch: usize,
    pub fit: GmmFit,
    /// `(sample_id, loss, g)` for every training sample, in dataset order.
    pub samples: Vec<(u64, f64, f64)>,
}

pub struct RunDir {
    pub path: PathBuf,
    log: BufWriter<File>,
    gmm: BufWriter<File>,
}

fn unix_now() -> f64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub(crate) fn timestamp() -> f64 {
    unix_now()
}

impl RunDir {
    /// Picks a fresh directory under `root` named by config hash and seed.
    pub fn fresh_path(root: &Path, config: &TrainConfig) -> PathBuf {
        let stem = format!("{}-s{}", &config.hash()[..12], config.seed);
        let mut path = root.join(&stem);
        let mut k = 2;
        while path.exists() {
            path = root.join(format!("{stem}-{k}"));
            k += 1;
        }
        path
    }

    /// Creates the directory and writes the manifest; fails if it already exists.
    pub fn create(path: &Path, manifest: &RunManifest) -> Result<Self> {
        if path.exists() {
            return Err(SanmError::invalid(format!("run directory {} already exists", path.display())));
        }
        let io = |p: &Path| {
            let p = p.to_path_buf();
            move |e| SanmError::io(p, e)
        };
        fs::create_dir_all(path.join("checkpoints")).map_err(io(path))?;
        let mpath = path.join("manifest.json");
        fs::write(&mpath, serde_json::to_string_pretty(manifest)?).map_err(io(&mpath))?;
        let cpath = path.join("config.toml");
        fs::write(&cpath, manifest.config.to_toml_string()).map_err(io(&cpath))?;
        let open = |name: &str| -> Result<BufWriter<File>> {
            let p = path.join(name);
            OpenOptions::new()
                .create_new(true)
                .append(true)
                .open(&p)
                .map(BufWriter::new)
                .map_err(|e| SanmError::io(p, e))
        };
        Ok(RunDir {
            path: path.to_path_buf(),
            log: open("log.jsonl")?,
            gmm: open("gmm.jsonl")?,
        })
    }

    pub fn append_log(&mut self, record: &LogRecord) -> Result<()> {
        let line = serde_json::to_string(record)?;
        writeln!(self.log, "{line}").map_err(|e| SanmError::io(self.path.join("log.jsonl"), e))
    }

    pub fn append_gmm(&mut self, record: &GmmRecord) -> Result<()> {
        let line = serde_json::to_string(record)?;
        writeln!(self.gmm, "{line}").map_err(|e| SanmError::io(self.path.join("gmm.jsonl"), e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.log.flush().map_err(|e| SanmError::io(self.path.join("log.jsonl"), e))?;
        self.gmm.flush().map_err(|e| SanmError::io(self.path.join("gmm.jsonl"), e))
    }

    pub fn save_checkpoint(&mut self, ck: &Checkpoint, name: &str) -> Result<PathBuf> {
        ck.save(&self.path.join("checkpoints"), name)
    }

    /// Writes an auxiliary JSON file (summary, evaluation) next to the log.
    pub fn write_json<S: Serialize>(&self, name: &str, value: &S) -> Result<()> {
        let p = self.path.join(name);
        fs::write(&p, serde_json::to_string_pretty(value)?).map_err(|e| SanmError::io(p, e))
    }
}

pub fn read_manifest(run: &Path) -> Result<RunManifest> {
    let p = run.join("manifest.json");
    let text = fs::read_to_string(&p).map_err(|e| SanmError::io(&p, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_log(run: &Path) -> Result<Vec<LogRecord>> {
    let p = run.join("log.jsonl");
    let text = fs::read_to_string(&p).map_err(|e| SanmError::io(&p, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(SanmError::from))
        .collect()
}

