//! Training configuration: a flat TOML table with typed validation.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::activation::{CamMode, CamOptions};
use crate::error::{Result, SanmError};
use crate::masking::{FillPolicy, MaskConfig, RatioPolicy};
use crate::nn::{Architecture, LrSchedule};
use crate::reconstruction::ReconTarget;

/// Which distribution the regularized label starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelBase {
    /// One-hot of the (possibly noisy) training label.
    #[default]
    NoisyLabel,
    /// Softmax prediction on the unmasked image.
    Prediction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioPolicyKind {
    #[default]
    Adaptive,
    Fixed,
    Random,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub architecture: Architecture,
    /// First-stage channels; `None` uses the architecture default.
    pub width: Option<usize>,
    pub decoder_channels: usize,

    pub mu: f64,
    pub delta: f64,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Fraction of `epochs` after which the rate is multiplied by `lr_gamma`.
    pub lr_drop_at: f64,
    pub lr_gamma: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,

    pub amg: bool,
    pub nlr: bool,
    pub smr: bool,
    pub label_base: LabelBase,

    pub ratio_policy: RatioPolicyKind,
    pub fixed_ratio: f64,
    pub random_ratio: [f64; 2],
    /// `[clean, noisy]`.
    pub binary_ratio: [f64; 2],

    pub cam_mode: CamMode,
    pub cam_rectify: bool,
    /// Refit the loss mixture every this many epochs once masking is active.
    pub gmm_period: usize,
    pub recon_target: ReconTarget,

    /// Per-channel normalization applied to encoder inputs.
    pub norm_mean: Vec<f32>,
    pub norm_std: Vec<f32>,

    pub eval_batch_size: usize,
    /// Write a checkpoint every this many epochs (the final epoch is always written).
    pub checkpoint_every: usize,
    pub seed: u64,
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            architecture: Architecture::SmallCnn,
            width: None,
            decoder_channels: 32,
            mu: 0.2,
            delta: 0.5,
            beta: 1.0,
            epochs: 30,
            batch_size: 64,
            lr: 0.02,
            lr_drop_at: 2.0 / 3.0,
            lr_gamma: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            warmup_epochs: 5,
            amg: true,
            nlr: true,
            smr: true,
            label_base: LabelBase::NoisyLabel,
            ratio_policy: RatioPolicyKind::Adaptive,
            fixed_ratio: 0.2,
            random_ratio: [0.2, 0.4],
            binary_ratio: [0.2, 0.3],
            cam_mode: CamMode::Gradient,
            cam_rectify: true,
            gmm_period: 1,
            recon_target: ReconTarget::AllPixels,
            norm_mean: Vec::new(),
            norm_std: Vec::new(),
            eval_batch_size: 256,
            checkpoint_every: 10,
            seed: 0,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| SanmError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Applies `key = value` overrides given as TOML fragments.
    pub fn with_overrides<'a>(&self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut table = toml::Value::try_from(self).expect("config is always serializable");
        let map = table.as_table_mut().expect("config is a table");
        for (key, raw) in pairs {
            let value: toml::Value = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            map.insert(key.to_string(), value);
        }
        let cfg: TrainConfig = table.try_into().map_err(|e: toml::de::Error| SanmError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SanmError::config(m));
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs ({}) must be smaller than epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if !self.amg && (self.nlr || self.smr) {
            return bad("nlr and smr operate on masked images and require amg".into());
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta = {} must be a non-negative number", self.beta));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr = {} must be positive", self.lr));
        }
        if !(0.0..=1.0).contains(&self.lr_drop_at) || !(self.lr_gamma > 0.0) {
            return bad("lr_drop_at must lie in [0, 1] and lr_gamma must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must lie in [0, 1) and weight_decay be non-negative".into());
        }
        if self.gmm_period == 0 || self.checkpoint_every == 0 {
            return bad("gmm_period and checkpoint_every must be positive".into());
        }
        if self.decoder_channels == 0 || self.width == Some(0) {
            return bad("layer widths must be positive".into());
        }
        if self.norm_mean.len() != self.norm_std.len() {
            return bad("norm_mean and norm_std must have the same length".into());
        }
        if self.norm_std.iter().any(|s| !(*s > 0.0)) {
            return bad("norm_std entries must be positive".into());
        }
        self.mask_config().validate()
    }

    pub fn ratio_policy(&self) -> RatioPolicy {
        match self.ratio_policy {
            RatioPolicyKind::Adaptive => RatioPolicy::Adaptive,
            RatioPolicyKind::Fixed => RatioPolicy::Fixed { ratio: self.fixed_ratio },
            RatioPolicyKind::Random => RatioPolicy::Random {
                lo: self.random_ratio[0],
                hi: self.random_ratio[1],
            },
            RatioPolicyKind::Binary => RatioPolicy::Binary {
                clean: self.binary_ratio[0],
                noisy: self.binary_ratio[1],
            },
        }
    }

    pub fn mask_config(&self) -> MaskConfig {
        MaskConfig {
            mu: self.mu,
            delta: self.delta,
            fill: FillPolicy::UniformRandom,
            policy: self.ratio_policy(),
            seed: self.seed,
        }
    }

    pub fn cam_options(&self) -> CamOptions {
        CamOptions {
            mode: self.cam_mode,
            rectify: self.cam_rectify,
        }
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.lr,
            drop_at: self.lr_drop_at,
            gamma: self.lr_gamma,
        }
    }

    /// Reconstruction weight actually applied.
    pub fn effective_beta(&self) -> f64 {
        if self.smr {
            self.beta
        } else {
            0.0
        }
    }

    /// SHA-256 over the canonical TOML rendering.
    pub fn hash(&self) -> String {
        format!("{:x}", Sha256::digest(self.to_toml_string().as_bytes()))
    }

    pub fn toggles_label(&self) -> String {
        let on: Vec<&str> = [("amg", self.amg), ("nlr", self.nlr), ("smr", self.smr)]
            .iter()
            .filter(|(_, v)| *v)
            .map(|(k, _)| *k)
            .collect();
        if on.is_empty() {
            "ce".into()
        } else {
            on.join("+")
        }
    }
}

/// Parses `amg=on,nlr=off,...` into overrides on `cfg`.
pub fn apply_toggles(cfg: &TrainConfig, spec: &str) -> Result<TrainConfig> {
    let mut out = cfg.clone();
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| SanmError::config(format!("toggle `{item}` is not key=value")))?;
        let flag = match value.trim() {
            "on" | "true" | "1" => true,
            "off" | "false" | "0" => false,
            other => return Err(SanmError::config(format!("toggle value `{other}` is not on/off"))),
        };
        match key.trim() {
            "amg" => out.amg = flag,
            "nlr" => out.nlr = flag,
            "smr" => out.smr = flag,
            other => return Err(SanmError::config(format!("unknown toggle `{other}`"))),
        }
    }
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!((c.mu, c.beta, c.batch_size, c.lr), (0.2, 1.0, 64, 0.02));
    }

    #[test]
    fn nlr_without_amg_is_rejected() {
        let c = TrainConfig::default();
        assert!(apply_toggles(&c, "amg=off,nlr=on").unwrap_err().is_config());
        let base = apply_toggles(&c, "amg=off,nlr=off,smr=off").unwrap();
        assert_eq!(base.toggles_label(), "ce");
    }

    #[test]
    fn warmup_must_precede_the_end() {
        let c = TrainConfig {
            epochs: 5,
            warmup_epochs: 5,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let none = TrainConfig {
            epochs: 0,
            ..c
        };
        none.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let c = TrainConfig::from_toml_str("mu = 0.3\nepochs = 12\nlabel_base = \"prediction\"\n").unwrap();
        assert_eq!(c.mu, 0.3);
        assert_eq!(c.label_base, LabelBase::Prediction);
        assert_eq!(TrainConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
        assert!(TrainConfig::from_toml_str("mu = 0.3\nbogus = 1\n").is_err());
        assert!(TrainConfig::from_toml_str("mu = 1.5\n").is_err());
    }

    #[test]
    fn overrides_parse_typed_values() {
        let c = TrainConfig::default()
            .with_overrides([("mu", "0.1"), ("architecture", "preact_resnet18"), ("seed", "7")])
            .unwrap();
        assert_eq!(c.mu, 0.1);
        assert_eq!(c.architecture, Architecture::PreactResnet18);
        assert_eq!(c.seed, 7);
        assert!(TrainConfig::default().with_overrides([("epochs", "\"x\"")]).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = TrainConfig::default();
        let b = TrainConfig { seed: 1, ..a.clone() };
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), a.clone().hash());
    }
}
