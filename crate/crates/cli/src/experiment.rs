//! Experiment files: a training config plus where the data comes from and how
//! its labels are corrupted, in one flat TOML table.
//!
//! Data keys are listed in [`DATA_KEYS`]; everything else must be a
//! [`TrainConfig`] field.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use sanm::data::{cifar, store, synthetic, Dataset, Splits};
use sanm::noise::{inject_noise, noise_report, NoiseKind, NoiseReport, NoiseSpec, TransitionMap};
use sanm::trainer::{NoiseSetting, TrainConfig};
use sanm::{Exec, Result, SanmError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    #[default]
    Synthetic,
    Cifar10,
    Cifar100,
    /// A directory written by `sanm inject`.
    Stored,
}

pub const DATA_KEYS: &[&str] = &[
    "data",
    "data_dir",
    "train_per_class",
    "test_per_class",
    "synthetic_train",
    "synthetic_test",
    "synthetic_side",
    "synthetic_seed",
    "noise_kind",
    "noise_rate",
    "noise_seed",
    "noise_map",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub data: Source,
    /// CIFAR batches or a stored dataset. CIFAR falls back to
    /// `$SANM_CIFAR10_DIR` / `$SANM_CIFAR100_DIR`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_per_class: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_per_class: Option<usize>,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub synthetic_side: usize,
    pub synthetic_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_kind: Option<NoiseKind>,
    pub noise_rate: f64,
    /// Defaults to the training seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_map: Option<PathBuf>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            data: Source::Synthetic,
            data_dir: None,
            train_per_class: None,
            test_per_class: None,
            synthetic_train: 600,
            synthetic_test: 200,
            synthetic_side: 32,
            synthetic_seed: 0,
            noise_kind: None,
            noise_rate: 0.0,
            noise_seed: None,
            noise_map: None,
        }
    }
}

/// Loaded splits with noisy training labels.
pub struct LoadedData {
    pub splits: Splits,
    pub noise: Option<NoiseSpec>,
    pub report: NoiseReport,
}

impl DataSection {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(SanmError::config(format!("noise_rate {} outside [0, 1]", self.noise_rate)));
        }
        if self.noise_kind.is_none() && self.noise_rate != 0.0 {
            return Err(SanmError::config("noise_rate is set but noise_kind is not"));
        }
        if self.noise_kind == Some(NoiseKind::Asymmetric) && self.noise_map.is_none() {
            return Err(SanmError::config("asymmetric noise needs noise_map"));
        }
        if self.noise_kind == Some(NoiseKind::Symmetric) && self.noise_map.is_some() {
            return Err(SanmError::config("noise_map only applies to asymmetric noise"));
        }
        if self.data == Source::Stored && self.data_dir.is_none() {
            return Err(SanmError::config("data = \"stored\" needs data_dir"));
        }
        if self.train_per_class == Some(0) || self.test_per_class == Some(0) {
            return Err(SanmError::config("per-class subset sizes must be positive"));
        }
        Ok(())
    }

    pub fn noise_setting(&self) -> Option<NoiseSetting> {
        self.noise_kind.map(|kind| NoiseSetting {
            kind,
            rate: self.noise_rate,
        })
    }

    fn resolve_dir(&self) -> Result<PathBuf> {
        let env = match self.data {
            Source::Cifar10 => Some("SANM_CIFAR10_DIR"),
            Source::Cifar100 => Some("SANM_CIFAR100_DIR"),
            _ => None,
        };
        self.data_dir
            .clone()
            .or_else(|| env.and_then(std::env::var_os).map(PathBuf::from))
            .ok_or_else(|| {
                SanmError::config(format!(
                    "no data_dir for {:?}{}",
                    self.data,
                    env.map_or(String::new(), |v| format!(" (and ${v} is unset)"))
                ))
            })
    }

    fn raw_splits(&self) -> Result<Splits> {
        match self.data {
            Source::Synthetic => synthetic::generate(&synthetic::SyntheticSpec {
                train: self.synthetic_train,
                test: self.synthetic_test,
                side: self.synthetic_side,
                seed: self.synthetic_seed,
            }),
            Source::Cifar10 => cifar::load_cifar10(&self.resolve_dir()?),
            Source::Cifar100 => cifar::load_cifar100(&self.resolve_dir()?),
            Source::Stored => Ok(store::load(&self.resolve_dir()?)?.splits),
        }
    }

    pub fn noise_spec(&self, classes: usize, default_seed: u64) -> Result<Option<NoiseSpec>> {
        let Some(kind) = self.noise_kind else {
            return Ok(None);
        };
        let seed = self.noise_seed.unwrap_or(default_seed);
        let spec = match kind {
            NoiseKind::Symmetric => NoiseSpec::symmetric(self.noise_rate, classes, seed),
            NoiseKind::Asymmetric => {
                let path = self.noise_map.as_ref().expect("checked by validate");
                let text = std::fs::read_to_string(path).map_err(|e| SanmError::io(path, e))?;
                let (map_classes, map) = TransitionMap::from_toml_str(&text)?;
                if map_classes != classes {
                    return Err(SanmError::config(format!(
                        "{} is a {map_classes}-class map, the dataset has {classes} classes",
                        path.display()
                    )));
                }
                NoiseSpec::asymmetric(self.noise_rate, classes, seed, map)
            }
        };
        spec.validate()?;
        Ok(Some(spec))
    }

    /// Loads, subsets, and corrupts the training labels. Stored datasets keep
    /// their labels unless a noise kind is given, which re-derives them.
    pub fn load(&self, default_seed: u64, exec: Exec) -> Result<LoadedData> {
        self.validate()?;
        let raw = self.raw_splits()?;
        let subset = |ds: Dataset, n: Option<usize>| match n {
            Some(k) => ds.balanced_subset(k),
            None => ds,
        };
        let mut train = subset(raw.train, self.train_per_class);
        let test = subset(raw.test, self.test_per_class);
        let noise = self.noise_spec(train.classes, default_seed)?;
        if let Some(spec) = &noise {
            train = inject_noise(&train, spec, exec)?.data;
        }
        let report = noise_report(&train);
        Ok(LoadedData {
            splits: Splits { train, test },
            noise,
            report,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Experiment {
    pub data: DataSection,
    pub train: TrainConfig,
}

fn split_table(table: toml::Table) -> (toml::Table, toml::Table) {
    table.into_iter().partition(|(k, _)| DATA_KEYS.contains(&k.as_str()))
}

fn config_err(e: impl std::fmt::Display) -> SanmError {
    SanmError::config(e.to_string())
}

impl Experiment {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(config_err)?;
        let (data, train) = split_table(table);
        let exp = Experiment {
            data: data.try_into().map_err(config_err)?,
            train: train.try_into().map_err(config_err)?,
        };
        exp.validate()?;
        Ok(exp)
    }

    /// Reads an experiment file; relative paths in it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SanmError::io(path, e))?;
        let mut exp = Self::from_toml_str(&text).map_err(|e| match e {
            SanmError::Config(m) => SanmError::config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut exp.data.data_dir, &mut exp.data.noise_map].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(exp)
    }

    pub fn to_toml_string(&self) -> String {
        let mut table = toml::Table::try_from(&self.data).expect("data section is serializable");
        table.extend(toml::Table::try_from(&self.train).expect("config is serializable"));
        toml::to_string(&table).expect("table is serializable")
    }

    /// `key=value` overrides, routed to the data section or the training config.
    pub fn with_overrides(&self, pairs: &[(String, String)]) -> Result<Self> {
        let mut out = self.clone();
        let (data, train): (Vec<_>, Vec<_>) = pairs.iter().partition(|(k, _)| DATA_KEYS.contains(&k.as_str()));
        if !data.is_empty() {
            let mut table = toml::Table::try_from(&out.data).expect("data section is serializable");
            for (k, raw) in data {
                let value = format!("v = {raw}")
                    .parse::<toml::Table>()
                    .ok()
                    .and_then(|mut t| t.remove("v"))
                    .unwrap_or_else(|| toml::Value::String(raw.clone()));
                table.insert(k.clone(), value);
            }
            out.data = table.try_into().map_err(config_err)?;
        }
        out.train = out.train.with_overrides(train.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()
    }

    pub fn with_noise(&self, setting: &NoiseSetting) -> Self {
        let mut out = self.clone();
        out.data.noise_kind = Some(setting.kind);
        out.data.noise_rate = setting.rate;
        if setting.kind == NoiseKind::Symmetric {
            out.data.noise_map = None;
        }
        out
    }
}

/// Parses `sym-50` / `asym-40` (rates in percent).
pub fn parse_noise_setting(s: &str) -> Result<NoiseSetting> {
    let (kind, pct) = s
        .split_once('-')
        .ok_or_else(|| SanmError::config(format!("noise setting `{s}` is not <kind>-<percent>")))?;
    let rate: f64 = pct
        .parse()
        .map_err(|_| SanmError::config(format!("noise setting `{s}`: `{pct}` is not a number")))?;
    let setting = NoiseSetting {
        kind: kind.parse()?,
        rate: rate / 100.0,
    };
    if !(0.0..=1.0).contains(&setting.rate) {
        return Err(SanmError::config(format!("noise setting `{s}` outside 0-100%")));
    }
    Ok(setting)
}
