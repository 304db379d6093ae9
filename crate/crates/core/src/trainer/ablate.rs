//! Configuration grids: component toggles, mask-ratio sweeps, and ratio-policy
//! baselines, run over noise settings and seeds into one table.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::config::{RatioPolicyKind, TrainConfig};
use crate::error::Result;
use crate::noise::NoiseKind;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSetting {
    pub kind: NoiseKind,
    pub rate: f64,
}

impl NoiseSetting {
    pub fn label(&self) -> String {
        let k = match self.kind {
            NoiseKind::Symmetric => "sym",
            NoiseKind::Asymmetric => "asym",
        };
        format!("{k}-{}", (self.rate * 100.0).round() as i64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub config: TrainConfig,
}

impl AblationRow {
    fn new(name: impl Into<String>, config: TrainConfig) -> Self {
        AblationRow {
            name: name.into(),
            config,
        }
    }
}

/// Plain cross-entropy, then masking, label regularization, and reconstruction
/// switched on one at a time.
pub fn component_rows(base: &TrainConfig) -> Vec<AblationRow> {
    [(false, false, false), (true, false, false), (true, true, false), (true, true, true)]
        .into_iter()
        .map(|(amg, nlr, smr)| {
            let cfg = TrainConfig {
                amg,
                nlr,
                smr,
                ratio_policy: RatioPolicyKind::Adaptive,
                ..base.clone()
            };
            AblationRow::new(cfg.toggles_label(), cfg)
        })
        .collect()
}

pub fn mu_sweep_rows(base: &TrainConfig, mus: &[f64]) -> Vec<AblationRow> {
    mus.iter()
        .map(|&mu| AblationRow::new(format!("mu={mu}"), TrainConfig { mu, ..base.clone() }))
        .collect()
}

/// Fixed and random ratios (maximum region only) against the clean-probability
/// driven rule, all with masking on.
pub fn ratio_policy_rows(base: &TrainConfig) -> Vec<AblationRow> {
    let base = TrainConfig {
        amg: true,
        ..base.clone()
    };
    let with = |name: &str, f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        AblationRow::new(name, c)
    };
    vec![
        with("fixed-0.2", &|c| {
            c.ratio_policy = RatioPolicyKind::Fixed;
            c.fixed_ratio = 0.2;
        }),
        with("fixed-0.3", &|c| {
            c.ratio_policy = RatioPolicyKind::Fixed;
            c.fixed_ratio = 0.3;
        }),
        with("clean-0.2/noisy-0.3", &|c| {
            c.ratio_policy = RatioPolicyKind::Binary;
            c.binary_ratio = [0.2, 0.3];
        }),
        with("random-0.2..0.4", &|c| {
            c.ratio_policy = RatioPolicyKind::Random;
            c.random_ratio = [0.2, 0.4];
        }),
        with("noise-aware", &|c| c.ratio_policy = RatioPolicyKind::Adaptive),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRun {
    pub seed: u64,
    pub best: Option<f64>,
    pub last: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub row: String,
    pub column: String,
    pub runs: Vec<CellRun>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl AblationCell {
    pub fn mean_best(&self) -> Option<f64> {
        mean(self.runs.iter().filter_map(|r| r.best))
    }

    pub fn mean_last(&self) -> Option<f64> {
        mean(self.runs.iter().filter_map(|r| r.last))
    }

    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.error.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub fn cell(&self, row: &str, column: &str) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.row == row && c.column == column)
    }

    /// Markdown with `best / last` accuracy (percent, mean over seeds) per cell.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| configuration |");
        for c in &self.columns {
            let _ = write!(s, " {c} best / last |");
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(self.columns.len()));
        s.push('\n');
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |a| format!("{:.2}", 100.0 * a));
        for r in &self.rows {
            let _ = write!(s, "| {r} |");
            for c in &self.columns {
                match self.cell(r, c) {
                    Some(cell) => {
                        let _ = write!(s, " {} / {}", pct(cell.mean_best()), pct(cell.mean_last()));
                        if cell.failures() > 0 {
                            let _ = write!(s, " ({} failed)", cell.failures());
                        }
                        s.push_str(" |");
                    }
                    None => s.push_str(" - |"),
                }
            }
            s.push('\n');
        }
        s
    }

    /// One line per run: `row,column,seed,best,last,error`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,column,seed,best,last,error\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |a| format!("{a:.6}"));
        for cell in &self.cells {
            for r in &cell.runs {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{},{}",
                    cell.row,
                    cell.column,
                    r.seed,
                    opt(r.best),
                    opt(r.last),
                    r.error.as_deref().unwrap_or("").replace(',', ";")
                );
            }
        }
        s
    }
}

/// Outcome of one grid point: best and last test accuracy.
pub type RunResult = Result<(Option<f64>, Option<f64>)>;

/// Runs every `(row, column, seed)` through `runner`. The row config's seed is
/// replaced by each seed in turn; a failing run is recorded in its cell and the
/// grid continues.
pub fn ablate<F>(rows: &[AblationRow], columns: &[NoiseSetting], seeds: &[u64], mut runner: F) -> AblationTable
where
    F: FnMut(&str, &TrainConfig, &NoiseSetting) -> RunResult,
{
    let mut cells = Vec::new();
    for row in rows {
        for col in columns {
            let runs = seeds
                .iter()
                .map(|&seed| {
                    let cfg = TrainConfig {
                        seed,
                        ..row.config.clone()
                    };
                    match runner(&row.name, &cfg, col) {
                        Ok((best, last)) => CellRun {
                            seed,
                            best,
                            last,
                            error: None,
                        },
                        Err(e) => {
                            log::warn!("{} / {} / seed {seed} failed: {e}", row.name, col.label());
                            CellRun {
                                seed,
                                best: None,
                                last: None,
                                error: Some(e.to_string()),
                            }
                        }
                    }
                })
                .collect();
            cells.push(AblationCell {
                row: row.name.clone(),
                column: col.label(),
                runs,
            });
        }
    }
    AblationTable {
        rows: rows.iter().map(|r| r.name.clone()).collect(),
        columns: columns.iter().map(NoiseSetting::label).collect(),
        cells,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::SanmError;

    #[test]
    fn component_grid_mirrors_the_toggle_rows() {
        let rows = component_rows(&TrainConfig::default());
        let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, ["ce", "amg", "amg+nlr", "amg+nlr+smr"]);
        for r in &rows {
            r.config.validate().unwrap();
        }
    }

    #[test]
    fn failures_do_not_abort_the_grid() {
        let rows = mu_sweep_rows(&TrainConfig::default(), &[0.0, 0.1, 0.2, 0.3, 0.5]);
        let cols = [NoiseSetting {
            kind: NoiseKind::Symmetric,
            rate: 0.5,
        }];
        let table = ablate(&rows, &cols, &[1, 2], |name, cfg, _| {
            if name == "mu=0.3" && cfg.seed == 2 {
                Err(SanmError::invalid("boom"))
            } else {
                Ok((Some(cfg.mu), Some(cfg.mu / 2.0)))
            }
        });
        assert_eq!(table.rows.len(), 5);
        let cell = table.cell("mu=0.3", "sym-50").unwrap();
        assert_eq!(cell.failures(), 1);
        assert_eq!(cell.mean_best(), Some(0.3));
        assert!(table.to_markdown().contains("(1 failed)"));
        assert_eq!(table.to_csv().lines().count(), 11);
    }

    #[test]
    fn ratio_baselines_validate() {
        let rows = ratio_policy_rows(&TrainConfig::default());
        assert_eq!(rows.len(), 5);
        for r in rows {
            r.config.validate().unwrap();
        }
    }
}
