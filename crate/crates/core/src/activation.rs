//! Class activation maps and their peak coordinates.
//!
//! The default map is gradient-weighted: channel weights are the spatial mean of
//! the target logit's gradient with respect to the tapped feature map. The
//! weighted channel sum is rectified, bilinearly upsampled to image size, and
//! min-max normalized. Peaks are the first maximum/minimum in row-major order.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SanmError};
use crate::exec::Exec;

/// Encoder output for one image: the last convolutional block's feature map
/// plus the classifier logits and their softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTap {
    /// `(channels, height, width)`.
    pub feature_map: Array3<f32>,
    pub logits: Vec<f32>,
    pub prediction: Vec<f32>,
}

impl FeatureTap {
    pub fn new(feature_map: Array3<f32>, logits: Vec<f32>) -> Self {
        let prediction = softmax(&logits);
        FeatureTap {
            feature_map,
            logits,
            prediction,
        }
    }

    pub fn classes(&self) -> usize {
        self.logits.len()
    }
}

pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&l| ((l - m) as f64).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / z) as f32).collect()
}

/// First index of the maximum, so ties resolve to the lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn top_class(tap: &FeatureTap) -> usize {
    argmax(&tap.prediction)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CamMode {
    /// Channel weights from the spatially averaged logit gradient.
    #[default]
    Gradient,
    /// Channel weights taken directly from the classifier row (GAP heads only).
    Classic,
}

/// Source of channel weights for a class, normally the encoder's classifier head.
pub trait CamWeights: Sync {
    /// Gradient of logit `class` with respect to `tap.feature_map`.
    fn feature_gradient(&self, tap: &FeatureTap, class: usize) -> Array3<f32>;

    /// Classifier weights for `class` when the head is GAP followed by a linear layer.
    fn classifier_row(&self, class: usize) -> Option<Vec<f32>>;
}

/// Fixed per-class channel weights behaving like a GAP + linear head.
#[derive(Debug, Clone)]
pub struct FixedWeights(pub Array2<f32>);

impl CamWeights for FixedWeights {
    fn feature_gradient(&self, tap: &FeatureTap, class: usize) -> Array3<f32> {
        let (c, h, w) = tap.feature_map.dim();
        let scale = 1.0 / (h * w) as f32;
        Array3::from_shape_fn((c, h, w), |(k, _, _)| self.0[[class, k]] * scale)
    }

    fn classifier_row(&self, class: usize) -> Option<Vec<f32>> {
        Some(self.0.row(class).to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CamOptions {
    pub mode: CamMode,
    /// Clip negative evidence before normalizing.
    pub rectify: bool,
}

impl Default for CamOptions {
    fn default() -> Self {
        CamOptions {
            mode: CamMode::Gradient,
            rectify: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationResult {
    /// `(H, W)` map in `[0, 1]`.
    pub cam: Array2<f32>,
    pub max_coord: (usize, usize),
    pub min_coord: (usize, usize),
    pub target_class: usize,
    /// The rectified map was identically zero; coordinates are placeholders.
    pub degenerate: bool,
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn upsample_bilinear(src: &Array2<f32>, height: usize, width: usize) -> Array2<f32> {
    let (sh, sw) = src.dim();
    let sy = sh as f32 / height as f32;
    let sx = sw as f32 / width as f32;
    let coord = |dst: usize, scale: f32, len: usize| -> (usize, usize, f32) {
        let s = ((dst as f32 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f32);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, s - i0 as f32)
    };
    let cols: Vec<(usize, usize, f32)> = (0..width).map(|x| coord(x, sx, sw)).collect();
    Array2::from_shape_fn((height, width), |(y, x)| {
        let (y0, y1, fy) = coord(y, sy, sh);
        let (x0, x1, fx) = cols[x];
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bot = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bot * fy
    })
}

fn peaks(map: &Array2<f32>) -> ((usize, usize), (usize, usize)) {
    let w = map.ncols();
    let (mut imax, mut imin) = (0usize, 0usize);
    let flat = map.as_slice().expect("standard layout");
    for (i, &v) in flat.iter().enumerate() {
        if v > flat[imax] {
            imax = i;
        }
        if v < flat[imin] {
            imin = i;
        }
    }
    ((imax / w, imax % w), (imin / w, imin % w))
}

/// Channel weights for `class` under `mode`.
pub fn channel_weights(tap: &FeatureTap, class: usize, head: &dyn CamWeights, mode: CamMode) -> Result<Vec<f32>> {
    match mode {
        CamMode::Gradient => {
            let grad = head.feature_gradient(tap, class);
            if grad.dim() != tap.feature_map.dim() {
                return Err(SanmError::Shape("feature gradient does not match the feature map".into()));
            }
            Ok(grad
                .mean_axis(Axis(2))
                .and_then(|g| g.mean_axis(Axis(1)))
                .expect("non-empty feature map")
                .to_vec())
        }
        CamMode::Classic => head
            .classifier_row(class)
            .ok_or_else(|| SanmError::config("classic CAM needs a global-average-pool head")),
    }
}

pub fn compute_cam(
    tap: &FeatureTap,
    target_class: usize,
    image_size: (usize, usize),
    head: &dyn CamWeights,
    opts: CamOptions,
) -> Result<ActivationResult> {
    let (channels, fh, fw) = tap.feature_map.dim();
    let (h, w) = image_size;
    if target_class >= tap.classes() {
        return Err(SanmError::invalid(format!(
            "target class {target_class} outside [0, {})",
            tap.classes()
        )));
    }
    if fh == 0 || fw == 0 || fh > h || fw > w {
        return Err(SanmError::Shape(format!(
            "feature map {fh}x{fw} cannot be upsampled to {h}x{w}"
        )));
    }
    let alpha = channel_weights(tap, target_class, head, opts.mode)?;
    if alpha.len() != channels {
        return Err(SanmError::Shape(format!(
            "{} channel weights for {channels} channels",
            alpha.len()
        )));
    }
    let mut raw = Array2::<f32>::zeros((fh, fw));
    for (a, fmap) in alpha.iter().zip(tap.feature_map.outer_iter()) {
        raw.scaled_add(*a, &fmap);
    }
    if opts.rectify {
        raw.mapv_inplace(|v| v.max(0.0));
    }
    let mut cam = upsample_bilinear(&raw, h, w);
    let lo = cam.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = cam.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !lo.is_finite() || !hi.is_finite() {
        return Err(SanmError::NonFinite { stage: "activation map".into() });
    }
    if opts.rectify && hi <= 0.0 {
        return Ok(ActivationResult {
            cam: Array2::zeros((h, w)),
            max_coord: (h / 2, w / 2),
            min_coord: (0, 0),
            target_class,
            degenerate: true,
        });
    }
    if hi > lo {
        let inv = 1.0 / (hi - lo);
        cam.mapv_inplace(|v| ((v - lo) * inv).clamp(0.0, 1.0));
    } else {
        cam.fill(1.0);
    }
    let (max_coord, min_coord) = peaks(&cam);
    Ok(ActivationResult {
        cam,
        max_coord,
        min_coord,
        target_class,
        degenerate: false,
    })
}

/// CAMs for a batch of taps, each for its own top class.
pub fn compute_cams(
    taps: &[FeatureTap],
    image_size: (usize, usize),
    head: &dyn CamWeights,
    opts: CamOptions,
    exec: Exec,
) -> Result<Vec<ActivationResult>> {
    exec.map(taps.len(), |i| compute_cam(&taps[i], top_class(&taps[i]), image_size, head, opts))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn unit_weights(classes: usize, channels: usize) -> FixedWeights {
        FixedWeights(Array2::ones((classes, channels)))
    }

    #[test]
    fn top_class_examples() {
        let tap = |p: Vec<f32>| FeatureTap {
            feature_map: Array3::zeros((1, 1, 1)),
            logits: p.clone(),
            prediction: p,
        };
        assert_eq!(top_class(&tap(vec![0.1, 0.7, 0.2])), 1);
        assert_eq!(top_class(&tap(vec![0.1; 10])), 0);
        let mut one_hot = vec![0.0; 10];
        one_hot[9] = 1.0;
        assert_eq!(top_class(&tap(one_hot)), 9);
    }

    #[test]
    fn constant_map_ties_to_origin() {
        let tap = FeatureTap::new(Array3::from_elem((1, 4, 4), 0.3), vec![1.0, 0.0]);
        let r = compute_cam(&tap, 0, (16, 16), &unit_weights(2, 1), CamOptions::default()).unwrap();
        assert!(!r.degenerate);
        assert!(r.cam.iter().all(|&v| v == r.cam[[0, 0]]));
        assert_eq!(r.max_coord, (0, 0));
    }

    #[test]
    fn all_negative_evidence_is_flagged() {
        let tap = FeatureTap::new(Array3::from_elem((2, 4, 4), -1.0), vec![0.0, 1.0]);
        let r = compute_cam(&tap, 1, (16, 12), &unit_weights(2, 2), CamOptions::default()).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.max_coord, (8, 6));
        assert_eq!(r.min_coord, (0, 0));
        assert!(r.cam.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalized_map_spans_unit_interval() {
        let fmap = Array3::from_shape_fn((3, 8, 8), |(c, y, x)| ((c + 1) * (y * 8 + x)) as f32 % 7.0);
        let tap = FeatureTap::new(fmap, vec![0.0, 2.0, 1.0]);
        let r = compute_cam(&tap, 1, (32, 32), &unit_weights(3, 3), CamOptions::default()).unwrap();
        let lo = r.cam.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = r.cam.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        assert!(lo.abs() < 1e-6 && (hi - 1.0).abs() < 1e-6);
        assert_eq!(r.cam[r.max_coord], hi);
        assert_eq!(r.cam[r.min_coord], lo);
    }

    #[test]
    fn gradient_and_classic_modes_agree_for_gap_heads() {
        let fmap = Array3::from_shape_fn((4, 6, 6), |(c, y, x)| ((c * 13 + y * 5 + x * 3) % 11) as f32 - 3.0);
        let tap = FeatureTap::new(fmap, vec![0.0, 1.0]);
        let head = FixedWeights(Array2::from_shape_fn((2, 4), |(k, c)| (k as f32 + 1.0) * (c as f32 - 1.5)));
        let g = compute_cam(&tap, 1, (24, 24), &head, CamOptions::default()).unwrap();
        let c = compute_cam(
            &tap,
            1,
            (24, 24),
            &head,
            CamOptions {
                mode: CamMode::Classic,
                rectify: true,
            },
        )
        .unwrap();
        assert_eq!(g.max_coord, c.max_coord);
        assert_eq!(g.min_coord, c.min_coord);
        for (a, b) in g.cam.iter().zip(c.cam.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn rejects_bad_class_and_oversized_features() {
        let tap = FeatureTap::new(Array3::ones((1, 8, 8)), vec![0.0, 1.0]);
        let head = unit_weights(2, 1);
        assert!(compute_cam(&tap, 2, (32, 32), &head, CamOptions::default()).is_err());
        assert!(compute_cam(&tap, 0, (4, 32), &head, CamOptions::default()).is_err());
    }

    #[test]
    fn upsample_preserves_constants_and_identity() {
        let src = Array2::from_elem((3, 5), 2.5f32);
        assert!(upsample_bilinear(&src, 12, 20).iter().all(|&v| (v - 2.5).abs() < 1e-6));
        let src = Array2::from_shape_fn((4, 4), |(y, x)| (y * 4 + x) as f32);
        assert_eq!(upsample_bilinear(&src, 4, 4), src);
    }
}
