//! Label-quality-guided adversarial masks.
//!
//! Each image receives two rectangles: one centered on the CAM maximum with
//! ratio `mu * (1 - g)` and one centered on the CAM minimum with ratio `mu * g`,
//! where `g` is the sample's clean probability. Rectangle half-extents follow
//! from the ratio and a sampled aspect; bounds are clipped to the image and
//! rounded half-up. Masked pixels are refilled with `U(0, 1)` noise.
//!
//! Bounds are half-open: rows `h_up..h_dn`, columns `w_lt..w_rt`.

use ndarray::{Array3, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activation::ActivationResult;
use crate::error::{Result, SanmError};
use crate::exec::Exec;
use crate::rng::{self, Domain, StreamRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    MaxRegion,
    MinRegion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillPolicy {
    #[default]
    UniformRandom,
}

/// How the per-sample mask ratio is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum RatioPolicy {
    /// `mu * (1 - g)` at the maximum, `mu * g` at the minimum.
    #[default]
    Adaptive,
    /// Same ratio for every sample, maximum region only.
    Fixed { ratio: f64 },
    /// Ratio drawn from `U(lo, hi)` per sample, maximum region only.
    Random { lo: f64, hi: f64 },
    /// `noisy` when `g < 0.5`, else `clean`; maximum region only.
    Binary { clean: f64, noisy: f64 },
}

impl RatioPolicy {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(SanmError::config(format!("{name} = {v} outside [0, 1]")))
            }
        };
        match *self {
            RatioPolicy::Adaptive => Ok(()),
            RatioPolicy::Fixed { ratio } => unit("fixed ratio", ratio),
            RatioPolicy::Random { lo, hi } => {
                unit("random lo", lo)?;
                unit("random hi", hi)?;
                if lo > hi {
                    return Err(SanmError::config("random ratio range has lo > hi"));
                }
                Ok(())
            }
            RatioPolicy::Binary { clean, noisy } => {
                unit("clean ratio", clean)?;
                unit("noisy ratio", noisy)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub mu: f64,
    pub delta: f64,
    pub fill: FillPolicy,
    pub policy: RatioPolicy,
    pub seed: u64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            mu: 0.2,
            delta: 0.5,
            fill: FillPolicy::UniformRandom,
            policy: RatioPolicy::Adaptive,
            seed: 0,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(SanmError::config(format!("mu = {} outside [0, 1]", self.mu)));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(SanmError::config(format!("delta = {} outside (0, 1]", self.delta)));
        }
        self.policy.validate()
    }
}

/// Clipped, rounded, half-open pixel bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bounds {
    pub h_up: usize,
    pub h_dn: usize,
    pub w_lt: usize,
    pub w_rt: usize,
}

impl Bounds {
    pub fn area(&self) -> usize {
        (self.h_dn - self.h_up) * (self.w_rt - self.w_lt)
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    pub fn contains(&self, h: usize, w: usize) -> bool {
        (self.h_up..self.h_dn).contains(&h) && (self.w_lt..self.w_rt).contains(&w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub center: (usize, usize),
    pub ratio: f64,
    pub aspect: f64,
    /// Half-height and half-width before clipping, in pixels.
    pub half_extent: (f64, f64),
    pub bounds: Bounds,
    pub kind: RegionKind,
}

impl MaskSpec {
    /// Rectangle area before clipping, in continuous coordinates.
    pub fn unclipped_area(&self) -> f64 {
        4.0 * self.half_extent.0 * self.half_extent.1
    }
}

pub fn mask_ratio(mu: f64, g: f64, kind: RegionKind) -> f64 {
    match kind {
        RegionKind::MaxRegion => mu * (1.0 - g),
        RegionKind::MinRegion => mu * g,
    }
}

/// Draws an aspect from `U(delta, 1 / delta)`.
pub fn sample_aspect(config: &MaskConfig, rng: &mut impl Rng) -> f64 {
    if config.delta >= 1.0 {
        return 1.0;
    }
    rng.random_range(config.delta..=1.0 / config.delta)
}

fn round_half_up(v: f64) -> usize {
    (v + 0.5).floor().max(0.0) as usize
}

/// Half-extents `(half_height, half_width)` for a rectangle of `ratio * H * W` pixels.
pub fn half_extents(ratio: f64, aspect: f64, image_size: (usize, usize)) -> (f64, f64) {
    let area = (image_size.0 * image_size.1) as f64 * ratio;
    ((area * aspect / 4.0).sqrt(), (area / (4.0 * aspect)).sqrt())
}

pub fn mask_bounds(
    center: (usize, usize),
    ratio: f64,
    aspect: f64,
    image_size: (usize, usize),
) -> Result<Bounds> {
    let (h, w) = image_size;
    if center.0 >= h || center.1 >= w {
        return Err(SanmError::invalid(format!(
            "mask center {center:?} outside {h}x{w} image"
        )));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(SanmError::invalid(format!("mask ratio {ratio} outside [0, 1]")));
    }
    if !(aspect > 0.0 && aspect.is_finite()) {
        return Err(SanmError::invalid(format!("aspect {aspect} must be positive")));
    }
    let (hh, hw) = half_extents(ratio, aspect, image_size);
    let (ch, cw) = (center.0 as f64, center.1 as f64);
    Ok(Bounds {
        h_up: round_half_up((ch - hh).max(0.0)),
        h_dn: round_half_up((ch + hh).min(h as f64)),
        w_lt: round_half_up((cw - hw).max(0.0)),
        w_rt: round_half_up((cw + hw).min(w as f64)),
    })
}

fn make_spec(
    kind: RegionKind,
    center: (usize, usize),
    ratio: f64,
    aspect: f64,
    image_size: (usize, usize),
) -> Result<MaskSpec> {
    Ok(MaskSpec {
        center,
        ratio,
        aspect,
        half_extent: half_extents(ratio, aspect, image_size),
        bounds: mask_bounds(center, ratio, aspect, image_size)?,
        kind,
    })
}

/// Builds the max-region and min-region masks for one image.
///
/// Aspects are drawn from `rng` in that order; policies with a random ratio
/// draw it first.
pub fn build_masks(
    activation: &ActivationResult,
    g: f64,
    config: &MaskConfig,
    image_size: (usize, usize),
    rng: &mut impl Rng,
) -> Result<(MaskSpec, MaskSpec)> {
    if !(0.0..=1.0).contains(&g) {
        return Err(SanmError::invalid(format!("clean probability {g} outside [0, 1]")));
    }
    let (mut r_max, mut r_min) = match config.policy {
        RatioPolicy::Adaptive => (
            mask_ratio(config.mu, g, RegionKind::MaxRegion),
            mask_ratio(config.mu, g, RegionKind::MinRegion),
        ),
        RatioPolicy::Fixed { ratio } => (ratio, 0.0),
        RatioPolicy::Random { lo, hi } => (if hi > lo { rng.random_range(lo..hi) } else { lo }, 0.0),
        RatioPolicy::Binary { clean, noisy } => (if g < 0.5 { noisy } else { clean }, 0.0),
    };
    if activation.degenerate {
        r_max = 0.0;
        r_min = 0.0;
    }
    let a_max = sample_aspect(config, rng);
    let a_min = sample_aspect(config, rng);
    Ok((
        make_spec(RegionKind::MaxRegion, activation.max_coord, r_max, a_max, image_size)?,
        make_spec(RegionKind::MinRegion, activation.min_coord, r_min, a_min, image_size)?,
    ))
}

/// Returns a copy of `image` (`(C, H, W)`) with every spec's rectangle refilled
/// by `U(0, 1)` draws. Later specs overwrite earlier ones where they overlap.
pub fn apply_mask(image: &Array3<f32>, specs: &[MaskSpec], rng: &mut impl Rng) -> Result<Array3<f32>> {
    let (_, h, w) = image.dim();
    let mut out = image.clone();
    for spec in specs {
        let b = spec.bounds;
        if b.h_up > b.h_dn || b.w_lt > b.w_rt || b.h_dn > h || b.w_rt > w {
            return Err(SanmError::invalid(format!("mask bounds {b:?} outside {h}x{w} image")));
        }
        for mut plane in out.outer_iter_mut() {
            for y in b.h_up..b.h_dn {
                for x in b.w_lt..b.w_rt {
                    plane[[y, x]] = rng.random::<f32>();
                }
            }
        }
    }
    Ok(out)
}

/// Random stream for aspect (and ratio) draws of one sample in one epoch.
pub fn geometry_stream(seed: u64, epoch: usize, sample_id: u64) -> StreamRng {
    rng::stream(seed, Domain::Aspect, epoch as u64, sample_id)
}

pub fn fill_stream(seed: u64, epoch: usize, sample_id: u64) -> StreamRng {
    rng::stream(seed, Domain::Fill, epoch as u64, sample_id)
}

/// Masks for one sample: `[max_region, min_region]` and the masked image.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSample {
    pub specs: [MaskSpec; 2],
    pub image: Array3<f32>,
}

/// Builds and applies masks for a batch `(N, C, H, W)`, one stream per sample.
pub fn mask_batch(
    images: &Array4<f32>,
    activations: &[ActivationResult],
    clean_probs: &[f64],
    sample_ids: &[u64],
    epoch: usize,
    config: &MaskConfig,
    exec: Exec,
) -> Result<Vec<MaskedSample>> {
    let n = images.len_of(Axis(0));
    if activations.len() != n || clean_probs.len() != n || sample_ids.len() != n {
        return Err(SanmError::Shape("batch inputs disagree on sample count".into()));
    }
    let size = (images.dim().2, images.dim().3);
    exec.map(n, |i| {
        let id = sample_ids[i];
        let mut geo = geometry_stream(config.seed, epoch, id);
        let (max_spec, min_spec) = build_masks(&activations[i], clean_probs[i], config, size, &mut geo)?;
        let mut fill = fill_stream(config.seed, epoch, id);
        let img = images.index_axis(Axis(0), i).to_owned();
        let masked = apply_mask(&img, &[max_spec, min_spec], &mut fill)?;
        Ok(MaskedSample {
            specs: [max_spec, min_spec],
            image: masked,
        })
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::SeedableRng;

    fn activation(max: (usize, usize), min: (usize, usize), degenerate: bool) -> ActivationResult {
        ActivationResult {
            cam: Array2::zeros((32, 32)),
            max_coord: max,
            min_coord: min,
            target_class: 0,
            degenerate,
        }
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(mask_ratio(0.2, 1.0, RegionKind::MaxRegion), 0.0);
        assert_eq!(mask_ratio(0.2, 0.0, RegionKind::MaxRegion), 0.2);
        assert!((mask_ratio(0.2, 0.75, RegionKind::MinRegion) - 0.15).abs() < 1e-15);
    }

    #[test]
    fn aspect_support() {
        let mut rng = StreamRng::seed_from_u64(1);
        let one = MaskConfig {
            delta: 1.0,
            ..MaskConfig::default()
        };
        assert!((0..100).all(|_| sample_aspect(&one, &mut rng) == 1.0));
        let quarter = MaskConfig {
            delta: 0.25,
            ..MaskConfig::default()
        };
        assert!((0..10_000).all(|_| (0.25..=4.0).contains(&sample_aspect(&quarter, &mut rng))));
    }

    #[test]
    fn aspect_mean_for_half_delta() {
        let mut rng = StreamRng::seed_from_u64(2);
        let cfg = MaskConfig::default();
        let n = 100_000;
        let mean = (0..n).map(|_| sample_aspect(&cfg, &mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 1.25).abs() < 0.02, "{mean}");
    }

    #[test]
    fn bounds_examples() {
        let b = mask_bounds((16, 16), 0.25, 1.0, (32, 32)).unwrap();
        assert_eq!(
            b,
            Bounds {
                h_up: 8,
                h_dn: 24,
                w_lt: 8,
                w_rt: 24
            }
        );
        let (hh, hw) = half_extents(0.25, 1.0, (32, 32));
        assert!((4.0 * hh * hw - 256.0).abs() < 1e-9);
        let corner = mask_bounds((0, 0), 0.3, 1.7, (32, 32)).unwrap();
        assert_eq!((corner.h_up, corner.w_lt), (0, 0));
        let empty = mask_bounds((5, 9), 0.0, 1.0, (32, 32)).unwrap();
        assert!(empty.is_empty());
        assert_eq!((empty.h_up, empty.w_lt), (5, 9));
    }

    #[test]
    fn bounds_reject_bad_inputs() {
        assert!(mask_bounds((32, 0), 0.1, 1.0, (32, 32)).is_err());
        assert!(mask_bounds((0, 0), 1.1, 1.0, (32, 32)).is_err());
        assert!(mask_bounds((0, 0), 0.1, 0.0, (32, 32)).is_err());
    }

    #[test]
    fn empty_spec_list_is_identity() {
        let img = Array3::from_shape_fn((3, 8, 8), |(c, y, x)| ((c + y + x) % 5) as f32 / 4.0);
        let mut rng = StreamRng::seed_from_u64(0);
        assert_eq!(apply_mask(&img, &[], &mut rng).unwrap(), img);
    }

    #[test]
    fn rectangle_replaces_exactly_its_pixels() {
        let img = Array3::from_elem((3, 32, 32), 2.0f32); // outside U(0,1) so every fill differs
        let spec = make_spec(RegionKind::MaxRegion, (16, 16), 0.25, 1.0, (32, 32)).unwrap();
        let mut rng = StreamRng::seed_from_u64(3);
        let out = apply_mask(&img, &[spec], &mut rng).unwrap();
        for plane in out.outer_iter() {
            assert_eq!(plane.iter().filter(|&&v| v != 2.0).count(), 256);
        }
        assert!(out.indexed_iter().all(|((_, y, x), &v)| spec.bounds.contains(y, x) == (v != 2.0)));
        assert_eq!(img[[0, 16, 16]], 2.0);
    }

    #[test]
    fn full_image_fill_has_uniform_mean() {
        let img = Array3::zeros((1, 320, 320));
        let spec = make_spec(RegionKind::MaxRegion, (160, 160), 1.0, 1.0, (320, 320)).unwrap();
        assert_eq!(spec.bounds.area(), 320 * 320);
        let mut rng = StreamRng::seed_from_u64(4);
        let out = apply_mask(&img, &[spec], &mut rng).unwrap();
        let mean = out.iter().map(|&v| v as f64).sum::<f64>() / out.len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
    }

    #[test]
    fn build_masks_examples() {
        let act = activation((10, 10), (2, 30), false);
        let cfg = MaskConfig::default();
        let mut rng = StreamRng::seed_from_u64(5);
        let (mx, mn) = build_masks(&act, 0.5, &cfg, (32, 32), &mut rng).unwrap();
        assert!((mx.ratio - 0.1).abs() < 1e-15 && (mn.ratio - 0.1).abs() < 1e-15);
        assert_eq!((mx.center, mn.center), ((10, 10), (2, 30)));

        let (mx, mn) = build_masks(&act, 1.0, &cfg, (32, 32), &mut rng).unwrap();
        assert!(mx.bounds.is_empty());
        assert_eq!(mn.ratio, cfg.mu);

        let zero = MaskConfig { mu: 0.0, ..cfg };
        for g in [0.0, 0.3, 1.0] {
            let (mx, mn) = build_masks(&act, g, &zero, (32, 32), &mut rng).unwrap();
            assert!(mx.bounds.is_empty() && mn.bounds.is_empty());
        }

        let flagged = activation((16, 16), (0, 0), true);
        let (mx, mn) = build_masks(&flagged, 0.2, &cfg, (32, 32), &mut rng).unwrap();
        assert_eq!((mx.ratio, mn.ratio), (0.0, 0.0));
    }

    #[test]
    fn baseline_policies_mask_only_the_max_region() {
        let act = activation((10, 10), (20, 20), false);
        let mut rng = StreamRng::seed_from_u64(6);
        let fixed = MaskConfig {
            policy: RatioPolicy::Fixed { ratio: 0.3 },
            ..MaskConfig::default()
        };
        let (mx, mn) = build_masks(&act, 0.9, &fixed, (32, 32), &mut rng).unwrap();
        assert_eq!((mx.ratio, mn.ratio), (0.3, 0.0));
        let random = MaskConfig {
            policy: RatioPolicy::Random { lo: 0.2, hi: 0.4 },
            ..MaskConfig::default()
        };
        for _ in 0..100 {
            let (mx, _) = build_masks(&act, 0.9, &random, (32, 32), &mut rng).unwrap();
            assert!((0.2..0.4).contains(&mx.ratio));
        }
        let binary = MaskConfig {
            policy: RatioPolicy::Binary { clean: 0.2, noisy: 0.3 },
            ..MaskConfig::default()
        };
        assert_eq!(build_masks(&act, 0.1, &binary, (32, 32), &mut rng).unwrap().0.ratio, 0.3);
        assert_eq!(build_masks(&act, 0.9, &binary, (32, 32), &mut rng).unwrap().0.ratio, 0.2);
    }

    #[test]
    fn config_validation() {
        assert!(MaskConfig { mu: 1.2, ..MaskConfig::default() }.validate().is_err());
        assert!(MaskConfig { delta: 0.0, ..MaskConfig::default() }.validate().is_err());
        assert!(MaskConfig { delta: 1.5, ..MaskConfig::default() }.validate().is_err());
        assert!(MaskConfig::default().validate().is_ok());
    }

    #[test]
    fn batch_masks_do_not_depend_on_policy_or_batch_position() {
        let images = Array4::from_shape_fn((3, 3, 16, 16), |(n, c, y, x)| ((n + c + y * x) % 7) as f32 / 7.0);
        let acts = vec![
            activation((3, 3), (12, 12), false),
            activation((8, 8), (0, 15), false),
            activation((15, 0), (1, 1), false),
        ];
        let cfg = MaskConfig { seed: 9, ..MaskConfig::default() };
        let gs = [0.1, 0.5, 0.9];
        let ids = [40, 41, 42];
        let a = mask_batch(&images, &acts, &gs, &ids, 3, &cfg, Exec::Sequential).unwrap();
        let b = mask_batch(&images, &acts, &gs, &ids, 3, &cfg, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        // the same sample alone in a batch gets the same mask
        let single = images.slice(ndarray::s![1..2, .., .., ..]).to_owned();
        let c = mask_batch(&single, &acts[1..2], &gs[1..2], &ids[1..2], 3, &cfg, Exec::Sequential).unwrap();
        assert_eq!(c[0], a[1]);
    }
}
