//! `plot`: loss traces, accuracy-vs-μ curves, ablation bars, and galleries.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use sanm::trainer::run::read_log;
use sanm::trainer::{self, LogRecord};

use crate::ablate::{AblationRecord, Grid, ABLATION_FILE};
use crate::experiment::Experiment;
use crate::svg::{self, Bar, BarGroup, Series};
use crate::train::{last_clean_probs, load_run, EXPERIMENT_FILE};
use crate::visual;

pub enum Input {
    Run(PathBuf),
    Ablation(PathBuf),
}

pub fn classify(path: &Path) -> Option<Input> {
    if path.join(ABLATION_FILE).is_file() {
        Some(Input::Ablation(path.to_path_buf()))
    } else if path.join("manifest.json").is_file() && path.join(EXPERIMENT_FILE).is_file() {
        Some(Input::Run(path.to_path_buf()))
    } else {
        None
    }
}

fn name_of(path: &Path) -> String {
    path.file_name().map_or("run".into(), |n| n.to_string_lossy().into_owned())
}

/// Epoch-mean losses and accuracy for one run.
pub fn loss_trace(run: &Path) -> Result<String> {
    let log = read_log(run)?;
    let mut l_c = Vec::new();
    let mut l_r = Vec::new();
    let mut l_t = Vec::new();
    let mut acc = Vec::new();
    for r in &log {
        if let LogRecord::Epoch {
            epoch,
            l_c: c,
            l_r: rr,
            l_train,
            test_acc,
            ..
        } = r
        {
            let e = *epoch as f64 + 1.0;
            l_c.push((e, *c));
            l_r.push((e, *rr));
            l_t.push((e, *l_train));
            if let Some(a) = test_acc {
                acc.push((e, *a));
            }
        }
    }
    let mut series = vec![
        Series {
            label: "L_c".into(),
            points: l_c,
        },
        Series {
            label: "L_r".into(),
            points: l_r,
        },
        Series {
            label: "L_train".into(),
            points: l_t,
        },
    ];
    if !acc.is_empty() {
        series.push(Series {
            label: "test accuracy".into(),
            points: acc,
        });
    }
    Ok(svg::line_chart(&format!("{} losses", name_of(run)), "epoch", "epoch mean", &series))
}

/// Mean best accuracy against μ, one curve per dataset and noise setting.
fn mu_curve(points: &BTreeMap<String, BTreeMap<u64, Vec<f64>>>, title: &str) -> String {
    let series: Vec<Series> = points
        .iter()
        .map(|(label, by_mu)| Series {
            label: label.clone(),
            points: by_mu
                .iter()
                .map(|(mu, accs)| (f64::from_bits(*mu), accs.iter().sum::<f64>() / accs.len() as f64))
                .collect(),
        })
        .collect();
    svg::line_chart(title, "basic mask ratio mu", "mean best test accuracy", &series)
}

fn ablation_bars(rec: &AblationRecord, title: &str) -> String {
    let groups: Vec<BarGroup> = rec
        .columns
        .iter()
        .map(|col| BarGroup {
            label: col.label(),
            bars: rec
                .rows
                .iter()
                .map(|row| {
                    let cell = rec.table.cell(&row.name, &col.label());
                    let vals: Vec<f64> = cell.map_or(vec![], |c| c.runs.iter().filter_map(|r| r.best).collect());
                    let range = (!vals.is_empty()).then(|| {
                        vals.iter()
                            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)))
                    });
                    Bar {
                        label: row.name.clone(),
                        value: cell.and_then(|c| c.mean_best()).unwrap_or(f64::NAN),
                        range,
                    }
                })
                .collect(),
        })
        .collect();
    svg::bar_chart(title, "best test accuracy", &groups)
}

pub fn gallery(run: &Path, n: usize, checkpoint: &str) -> Result<image::RgbImage> {
    let mut loaded = load_run(run, checkpoint)?;
    let train = &loaded.data.splits.train;
    let ids: Vec<u64> = train.samples.iter().map(|s| s.id).collect();
    let g = last_clean_probs(run, &ids)?;
    let idx: Vec<usize> = (0..n.min(train.len())).collect();
    let views = trainer::inspect(
        &loaded.experiment.train,
        train,
        &mut loaded.models,
        &idx,
        g.as_deref(),
        loaded.checkpoint.info.epoch,
    )?;
    Ok(visual::gallery(&views))
}

pub struct PlotReport {
    pub written: Vec<PathBuf>,
    pub skipped: Vec<PathBuf>,
}

pub fn plot(paths: &[PathBuf], out: &Path, gallery_n: usize, checkpoint: &str) -> Result<PlotReport> {
    let mut report = PlotReport {
        written: Vec::new(),
        skipped: Vec::new(),
    };
    let inputs: Vec<Input> = paths
        .iter()
        .filter_map(|p| {
            let c = classify(p);
            if c.is_none() {
                report.skipped.push(p.clone());
            }
            c
        })
        .collect();
    if inputs.is_empty() {
        return Ok(report);
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let written = &mut report.written;
    let emit = |name: String, body: String| -> Result<PathBuf> {
        let p = out.join(name);
        fs::write(&p, body).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    };

    // (dataset/noise) -> mu bits -> best accuracies, over plain run inputs.
    let mut mu_points: BTreeMap<String, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for input in &inputs {
        match input {
            Input::Run(run) => {
                written.push(emit(format!("{}-loss.svg", name_of(run)), loss_trace(run)?)?);
                let exp = Experiment::load(&run.join(EXPERIMENT_FILE))?;
                let best = read_log(run)?.iter().rev().find_map(|r| match r {
                    LogRecord::Epoch { best_acc, .. } => *best_acc,
                    _ => None,
                });
                if let Some(b) = best {
                    let noise = exp.data.noise_setting().map_or("clean".into(), |s| s.label());
                    let key = format!("{:?} {noise}", exp.data.data).to_lowercase();
                    mu_points.entry(key).or_default().entry(exp.train.mu.to_bits()).or_default().push(b);
                }
                if gallery_n > 0 {
                    let img = gallery(run, gallery_n, checkpoint)?;
                    let p = out.join(format!("{}-gallery.png", name_of(run)));
                    visual::save(&img, &p)?;
                    written.push(p);
                }
            }
            Input::Ablation(dir) => {
                let text = fs::read_to_string(dir.join(ABLATION_FILE))?;
                let rec: AblationRecord = serde_json::from_str(&text)?;
                let name = name_of(dir);
                written.push(emit(format!("{name}-bars.svg"), ablation_bars(&rec, &format!("{name}: mean best accuracy")))?);
                if rec.grid == Grid::Mu {
                    let mut pts: BTreeMap<String, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
                    for row in &rec.rows {
                        for col in &rec.columns {
                            if let Some(m) = rec.table.cell(&row.name, &col.label()).and_then(|c| c.mean_best()) {
                                pts.entry(col.label()).or_default().insert(row.config.mu.to_bits(), vec![m]);
                            }
                        }
                    }
                    written.push(emit(format!("{name}-mu.svg"), mu_curve(&pts, &format!("{name}: accuracy vs mu")))?);
                }
            }
        }
    }
    let distinct_mu = mu_points.values().any(|m| m.len() >= 2);
    if distinct_mu {
        written.push(emit("runs-mu.svg".into(), mu_curve(&mu_points, "accuracy vs mu"))?);
    }
    Ok(report)
}
