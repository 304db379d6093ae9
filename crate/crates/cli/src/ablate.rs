//! `ablate`: a configuration grid over noise settings and seeds, run in
//! process or across a pool of `sanm train` child processes.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Mutex;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use sanm::trainer::ablate::{ablate, component_rows, mu_sweep_rows, ratio_policy_rows};
use sanm::trainer::{AblationRow, AblationTable, NoiseSetting};
use sanm::SanmError;

use crate::experiment::Experiment;
use crate::train::{train_experiment, Dumps, RunSummary};

pub const ABLATION_FILE: &str = "ablation.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Grid {
    /// CE, +masking, +label regularization, +reconstruction.
    Components,
    /// Basic mask ratio sweep.
    Mu,
    /// Fixed, class-split, random, and noise-aware ratio policies.
    RatioPolicy,
}

impl Grid {
    fn name(self) -> &'static str {
        match self {
            Grid::Components => "components",
            Grid::Mu => "mu",
            Grid::RatioPolicy => "ratio-policy",
        }
    }
}

/// Everything `plot` needs to redraw the grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRecord {
    pub grid: Grid,
    pub rows: Vec<AblationRow>,
    pub columns: Vec<NoiseSetting>,
    pub seeds: Vec<u64>,
    pub table: AblationTable,
    pub runs: Vec<(String, String, u64, Option<PathBuf>)>,
}

struct Job {
    row: String,
    column: String,
    seed: u64,
    file: PathBuf,
    experiment: Experiment,
}

/// First of `root/ablation-<grid>`, `-1`, `-2`, ... that does not exist yet.
fn fresh_dir(root: &Path, grid: Grid) -> PathBuf {
    let base = root.join(format!("ablation-{}", grid.name()));
    if !base.exists() {
        return base;
    }
    (1..)
        .map(|k| root.join(format!("ablation-{}-{k}", grid.name())))
        .find(|p| !p.exists())
        .expect("unbounded")
}

fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

pub fn rows_for(grid: Grid, base: &Experiment, mus: &[f64]) -> Vec<AblationRow> {
    match grid {
        Grid::Components => component_rows(&base.train),
        Grid::Mu => mu_sweep_rows(&base.train, mus),
        Grid::RatioPolicy => ratio_policy_rows(&base.train),
    }
}

/// Runs one job in a child process; the child writes its summary to a file.
fn run_child(exe: &Path, job: &Job, runs: &Path, threads: usize) -> Result<RunSummary> {
    let summary = job.file.with_extension("summary.json");
    let log = fs::File::create(job.file.with_extension("log"))?;
    let status = Command::new(exe)
        .arg("train")
        .arg("--config")
        .arg(&job.file)
        .arg("--out")
        .arg(runs)
        .arg("--summary")
        .arg(&summary)
        .env("RAYON_NUM_THREADS", threads.to_string())
        .stdout(Stdio::null())
        .stderr(log)
        .status()
        .with_context(|| format!("spawning {}", exe.display()))?;
    if !status.success() {
        anyhow::bail!("child exited with {status}; see {}", job.file.with_extension("log").display());
    }
    let text = fs::read_to_string(&summary).with_context(|| format!("reading {}", summary.display()))?;
    Ok(serde_json::from_str(&text)?)
}

pub struct AblateArgs<'a> {
    pub base: &'a Experiment,
    pub grid: Grid,
    pub mus: &'a [f64],
    pub columns: &'a [NoiseSetting],
    pub seeds: &'a [u64],
    pub parallel: usize,
    pub out_root: &'a Path,
}

pub fn run_ablation(args: AblateArgs<'_>) -> Result<(PathBuf, AblationRecord)> {
    let rows = rows_for(args.grid, args.base, args.mus);
    // Materialize and validate every grid point before any compute.
    let mut jobs = Vec::new();
    for row in &rows {
        for col in args.columns {
            for &seed in args.seeds {
                let mut exp = args.base.with_noise(col);
                exp.train = row.config.clone();
                exp.train.seed = seed;
                exp.validate()
                    .map_err(|e| SanmError::config(format!("{} / {} / seed {seed}: {e}", row.name, col.label())))?;
                jobs.push(Job {
                    row: row.name.clone(),
                    column: col.label(),
                    seed,
                    file: PathBuf::new(),
                    experiment: exp,
                });
            }
        }
    }
    let dir = fresh_dir(args.out_root, args.grid);
    let job_dir = dir.join("jobs");
    let runs = dir.join("runs");
    fs::create_dir_all(&job_dir).with_context(|| format!("creating {}", job_dir.display()))?;
    for job in &mut jobs {
        job.file = job_dir.join(format!("{}__{}__s{}.toml", slug(&job.row), slug(&job.column), job.seed));
        fs::write(&job.file, job.experiment.to_toml_string())?;
    }
    log::info!("{} grid: {} runs into {}", args.grid.name(), jobs.len(), dir.display());

    let results: Mutex<HashMap<(String, String, u64), Result<RunSummary, String>>> = Mutex::new(HashMap::new());
    let record = |job: &Job, r: Result<RunSummary>| {
        match &r {
            Ok(s) => log::info!("{} / {} / seed {}: best {:?}", job.row, job.column, job.seed, s.best_acc),
            Err(e) => log::warn!("{} / {} / seed {}: {e:#}", job.row, job.column, job.seed),
        }
        results
            .lock()
            .expect("no panics while holding the lock")
            .insert((job.row.clone(), job.column.clone(), job.seed), r.map_err(|e| format!("{e:#}")));
    };
    if args.parallel <= 1 {
        for job in &jobs {
            record(job, train_experiment(&job.experiment, &runs, &Dumps::default()));
        }
    } else {
        let exe = std::env::current_exe().context("locating the sanm executable")?;
        let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
        let threads = (cores / args.parallel).max(1);
        let next = Mutex::new(jobs.iter());
        std::thread::scope(|s| {
            for _ in 0..args.parallel.min(jobs.len()) {
                s.spawn(|| loop {
                    let Some(job) = next.lock().expect("queue lock").next() else {
                        break;
                    };
                    record(job, run_child(&exe, job, &runs, threads));
                });
            }
        });
    }

    let results = results.into_inner().expect("workers finished");
    let table = ablate(&rows, args.columns, args.seeds, |row, cfg, col| {
        match &results[&(row.to_string(), col.label(), cfg.seed)] {
            Ok(s) => Ok((s.best_acc, s.last_acc)),
            Err(e) => Err(SanmError::invalid(e.clone())),
        }
    });
    let mut run_dirs: Vec<_> = results
        .iter()
        .map(|((r, c, s), res)| (r.clone(), c.clone(), *s, res.as_ref().ok().map(|x| x.run_dir.clone())))
        .collect();
    run_dirs.sort();
    let rec = AblationRecord {
        grid: args.grid,
        rows,
        columns: args.columns.to_vec(),
        seeds: args.seeds.to_vec(),
        table,
        runs: run_dirs,
    };
    fs::write(dir.join(ABLATION_FILE), serde_json::to_string_pretty(&rec)? + "\n")?;
    fs::write(dir.join("ablation.md"), rec.table.to_markdown())?;
    fs::write(dir.join("ablation.csv"), rec.table.to_csv())?;
    Ok((dir, rec))
}
