//! Synthetic label-noise injection.
//!
//! Symmetric noise replaces a label, with probability `rate`, by a uniform draw
//! over the *other* `c - 1` classes, so the nominal rate equals the actual
//! corruption rate. Asymmetric noise replaces it, with the same probability,
//! through a fixed class transition table loaded from configuration.
//!
//! Every sample draws from its own stream keyed by `(seed, sample id)`, which
//! makes injection a pure function of the dataset and the `NoiseSpec`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Result, SanmError};
use crate::exec::Exec;
use crate::rng::{self, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Symmetric,
    Asymmetric,
}

impl std::str::FromStr for NoiseKind {
    type Err = SanmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symmetric" | "sym" => Ok(NoiseKind::Symmetric),
            "asymmetric" | "asym" => Ok(NoiseKind::Asymmetric),
            other => Err(SanmError::config(format!("unknown noise kind '{other}'"))),
        }
    }
}

/// Class transition table for asymmetric noise. Classes absent from the table
/// are never corrupted.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TransitionMap(pub BTreeMap<usize, usize>);

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MapFile {
    #[serde(default)]
    #[allow(dead_code)]
    name: Option<String>,
    classes: usize,
    map: BTreeMap<String, usize>,
}

impl TransitionMap {
    pub fn new(pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        TransitionMap(pairs.into_iter().collect())
    }

    /// Parses a map file: `classes = N` plus a `[map]` table of `"from" = to`.
    pub fn from_toml_str(text: &str) -> Result<(usize, Self)> {
        let file: MapFile =
            toml::from_str(text).map_err(|e| SanmError::config(format!("transition map: {e}")))?;
        let mut map = BTreeMap::new();
        for (k, v) in file.map {
            let from: usize = k
                .trim()
                .parse()
                .map_err(|_| SanmError::config(format!("transition map key '{k}' is not a class index")))?;
            map.insert(from, v);
        }
        let tm = TransitionMap(map);
        tm.check(file.classes)?;
        Ok((file.classes, tm))
    }

    pub fn get(&self, class: usize) -> Option<usize> {
        self.0.get(&class).copied()
    }

    fn check(&self, classes: usize) -> Result<()> {
        for (&from, &to) in &self.0 {
            if from >= classes || to >= classes {
                return Err(SanmError::config(format!(
                    "transition {from} -> {to} leaves [0, {classes})"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
    pub classes: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asymmetric_map: Option<TransitionMap>,
}

impl NoiseSpec {
    pub fn symmetric(rate: f64, classes: usize, seed: u64) -> Self {
        NoiseSpec {
            kind: NoiseKind::Symmetric,
            rate,
            classes,
            seed,
            asymmetric_map: None,
        }
    }

    pub fn asymmetric(rate: f64, classes: usize, seed: u64, map: TransitionMap) -> Self {
        NoiseSpec {
            kind: NoiseKind::Asymmetric,
            rate,
            classes,
            seed,
            asymmetric_map: Some(map),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(SanmError::config(format!("noise rate {} outside [0, 1]", self.rate)));
        }
        if self.classes < 2 {
            return Err(SanmError::config("noise needs at least 2 classes"));
        }
        match (self.kind, &self.asymmetric_map) {
            (NoiseKind::Symmetric, Some(_)) => {
                Err(SanmError::config("symmetric noise does not take a transition map"))
            }
            (NoiseKind::Asymmetric, None) => {
                Err(SanmError::config("asymmetric noise requires a transition map"))
            }
            (NoiseKind::Asymmetric, Some(m)) => m.check(self.classes),
            (NoiseKind::Symmetric, None) => Ok(()),
        }
    }

    fn corrupt(&self, id: u64, label: usize) -> usize {
        let mut rng = rng::stream(self.seed, Domain::Noise, 0, id);
        let u: f64 = rng.random();
        if u >= self.rate {
            return label;
        }
        match self.kind {
            NoiseKind::Symmetric => {
                let draw = rng.random_range(0..self.classes - 1);
                if draw >= label {
                    draw + 1
                } else {
                    draw
                }
            }
            NoiseKind::Asymmetric => self
                .asymmetric_map
                .as_ref()
                .and_then(|m| m.get(label))
                .unwrap_or(label),
        }
    }
}

/// A dataset whose noisy labels were produced by `spec` from its true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyDataset {
    pub data: Dataset,
    pub spec: NoiseSpec,
}

/// Re-derives every sample's noisy label from its true label under `spec`.
pub fn inject_noise(dataset: &Dataset, spec: &NoiseSpec, exec: Exec) -> Result<NoisyDataset> {
    spec.validate()?;
    if spec.classes != dataset.classes {
        return Err(SanmError::config(format!(
            "noise spec has {} classes, dataset has {}",
            spec.classes, dataset.classes
        )));
    }
    dataset.validate()?;
    let labels = exec.map(dataset.len(), |i| {
        let s = &dataset.samples[i];
        spec.corrupt(s.id, s.true_label)
    });
    let mut data = dataset.clone();
    for (s, noisy) in data.samples.iter_mut().zip(labels) {
        s.noisy_label = noisy;
    }
    Ok(NoisyDataset {
        data,
        spec: spec.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub samples: usize,
    pub flipped: usize,
    pub flip_fraction: f64,
    /// `confusion[true][noisy]` counts.
    pub confusion: Vec<Vec<u64>>,
    /// Per true class, the fraction of its samples that were flipped.
    pub per_class_flip: Vec<f64>,
}

pub fn noise_report(ds: &Dataset) -> NoiseReport {
    let c = ds.classes;
    let mut confusion = vec![vec![0u64; c]; c];
    for s in &ds.samples {
        confusion[s.true_label][s.noisy_label] += 1;
    }
    let flipped = ds.samples.iter().filter(|s| s.is_flipped()).count();
    let per_class_flip = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let total: u64 = row.iter().sum();
            if total == 0 {
                0.0
            } else {
                (total - row[k]) as f64 / total as f64
            }
        })
        .collect();
    NoiseReport {
        samples: ds.len(),
        flipped,
        flip_fraction: if ds.is_empty() { 0.0 } else { flipped as f64 / ds.len() as f64 },
        confusion,
        per_class_flip,
    }
}
