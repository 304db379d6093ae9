//! `train` and `evaluate`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use sanm::nn::checkpoint::Checkpoint;
use sanm::trainer::{self, evaluate, CeHost, Evaluation, GmmRecord, Models, Normalizer, RunDir, RunManifest};
use sanm::Exec;

use crate::experiment::{Experiment, LoadedData};
use crate::visual;

pub const EXPERIMENT_FILE: &str = "experiment.toml";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub config_hash: String,
    pub seed: u64,
    pub epochs: usize,
    pub best_acc: Option<f64>,
    pub last_acc: Option<f64>,
}

/// Which training samples to render after the run.
#[derive(Debug, Clone, Default)]
pub struct Dumps {
    pub cams: usize,
    pub masks: Vec<usize>,
    pub triptychs: usize,
}

impl Dumps {
    fn is_empty(&self) -> bool {
        self.cams == 0 && self.masks.is_empty() && self.triptychs == 0
    }
}

/// Loads the data, creates a fresh run directory under `out_root`, trains,
/// and writes the summary (and any requested figures) into it.
pub fn train_experiment(exp: &Experiment, out_root: &Path, dumps: &Dumps) -> Result<RunSummary> {
    exp.validate()?;
    let cfg = &exp.train;
    let exec = Exec::from_flag(cfg.parallel);
    let LoadedData { splits, noise, report } = exp.data.load(cfg.seed, exec)?;
    log::info!(
        "{}: {} train / {} test, {} of training labels flipped",
        splits.train.name,
        splits.train.len(),
        splits.test.len(),
        format!("{:.2}%", 100.0 * report.flip_fraction)
    );
    let path = RunDir::fresh_path(out_root, cfg);
    let noise_json = noise.as_ref().map(serde_json::to_value).transpose()?;
    let manifest = RunManifest::new(cfg, &splits.train, Some(&splits.test), noise_json, &path);
    let mut run = RunDir::create(&path, &manifest)?;
    fs::write(path.join(EXPERIMENT_FILE), exp.to_toml_string())
        .with_context(|| format!("writing {}", path.join(EXPERIMENT_FILE).display()))?;
    run.write_json("noise_report.json", &report)?;

    let mut models = Models::build(cfg, splits.train.shape, splits.train.classes)?;
    log::info!("encoder: {}", models.encoder.describe());
    let outcome = trainer::train(cfg, &splits.train, Some(&splits.test), &mut models, &mut CeHost, Some(&mut run))?;
    let summary = RunSummary {
        run_dir: path.clone(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        epochs: cfg.epochs,
        best_acc: outcome.best_acc,
        last_acc: outcome.last_acc,
    };
    run.write_json(SUMMARY_FILE, &summary)?;

    if !dumps.is_empty() {
        let fig = path.join("figures");
        fs::create_dir_all(&fig)?;
        let n = splits.train.len();
        let mut ids: Vec<usize> = (0..dumps.cams.max(dumps.triptychs).min(n)).collect();
        for &i in &dumps.masks {
            if !ids.contains(&i) {
                ids.push(i);
            }
        }
        let views = trainer::inspect(
            cfg,
            &splits.train,
            &mut models,
            &ids,
            outcome.clean_probs.as_deref(),
            cfg.epochs,
        )?;
        let by_index: HashMap<usize, &trainer::Inspection> = ids.iter().copied().zip(&views).collect();
        for i in 0..dumps.cams.min(n) {
            let v = by_index[&i];
            visual::save(&visual::cam_panel(v), &fig.join(format!("cam_{:05}.png", v.sample_id)))?;
        }
        for &i in &dumps.masks {
            let v = by_index[&i];
            visual::save(&visual::mask_pair(v), &fig.join(format!("mask_{:05}.png", v.sample_id)))?;
        }
        for i in 0..dumps.triptychs.min(n) {
            let v = by_index[&i];
            visual::save(&visual::triptych(v), &fig.join(format!("triptych_{:05}.png", v.sample_id)))?;
        }
        let specs: Vec<_> = views
            .iter()
            .map(|v| {
                serde_json::json!({
                    "sample_id": v.sample_id,
                    "true_label": v.true_label,
                    "noisy_label": v.noisy_label,
                    "clean_prob": v.clean_prob,
                    "max_coord": v.cam.max_coord,
                    "min_coord": v.cam.min_coord,
                    "masks": v.specs,
                    "target": v.target,
                })
            })
            .collect();
        run.write_json("figures/samples.json", &specs)?;
    }
    Ok(summary)
}

/// A run directory's experiment, models restored from `checkpoint`, and data.
pub struct LoadedRun {
    pub experiment: Experiment,
    pub models: Models,
    pub data: LoadedData,
    pub checkpoint: Checkpoint,
}

pub fn load_run(run: &Path, checkpoint: &str) -> Result<LoadedRun> {
    let experiment = Experiment::load(&run.join(EXPERIMENT_FILE))
        .with_context(|| format!("{} is not a run directory", run.display()))?;
    let cfg = &experiment.train;
    let data = experiment.data.load(cfg.seed, Exec::from_flag(cfg.parallel))?;
    let mut models = Models::build(cfg, data.splits.train.shape, data.splits.train.classes)?;
    let ck = Checkpoint::load(&run.join("checkpoints").join(format!("{checkpoint}.bin")))?;
    ck.restore(&mut models.encoder, Some(&mut models.decoder))?;
    Ok(LoadedRun {
        experiment,
        models,
        data,
        checkpoint: ck,
    })
}

/// Clean probabilities in dataset order from the last mixture fit of a run.
pub fn last_clean_probs(run: &Path, ids: &[u64]) -> Result<Option<Vec<f64>>> {
    let path = run.join("gmm.jsonl");
    let Ok(text) = fs::read_to_string(&path) else {
        return Ok(None);
    };
    let Some(line) = text.lines().rfind(|l| !l.trim().is_empty()) else {
        return Ok(None);
    };
    let rec: GmmRecord = serde_json::from_str(line).with_context(|| format!("parsing {}", path.display()))?;
    let g: HashMap<u64, f64> = rec.samples.iter().map(|&(id, _, g)| (id, g)).collect();
    Ok(ids.iter().map(|id| g.get(id).copied()).collect())
}

pub fn evaluate_run(run: &Path, checkpoint: &str, stored: Option<&Path>) -> Result<Evaluation> {
    let mut loaded = load_run(run, checkpoint)?;
    let cfg = &loaded.experiment.train;
    let test = match stored {
        Some(dir) => sanm::data::store::load(dir)?.splits.test,
        None => loaded.data.splits.test,
    };
    let norm = Normalizer::from_config(cfg, test.shape.channels)?;
    Ok(evaluate(
        &mut loaded.models.encoder,
        &test,
        &norm,
        cfg.eval_batch_size,
        Exec::from_flag(cfg.parallel),
    )?)
}
