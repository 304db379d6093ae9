//! Procedural shape dataset for smoke runs, tests, and benches.
//!
//! Ten classes, one per shape, drawn at a random position, size, and color
//! over a noisy background. Pixels are quantized to the 8-bit grid so the
//! dataset round-trips exactly through the on-disk store.

use ndarray::Array3;
use rand::Rng;

use super::{quantize, Dataset, ImageShape, LabeledSample, Splits};
use crate::error::{Result, SanmError};
use crate::rng::{self, Domain};

pub const CLASSES: usize = 10;

pub const SHAPE_NAMES: [&str; CLASSES] = [
    "square", "disc", "ring", "plus", "cross", "hbars", "vbars", "triangle", "frame", "diamond",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub train: usize,
    pub test: usize,
    pub side: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            train: 2000,
            test: 500,
            side: 32,
            seed: 0,
        }
    }
}

fn inside(class: usize, dx: f32, dy: f32) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    if ax > 1.0 || ay > 1.0 {
        return false;
    }
    match class {
        0 => true,
        1 => dx * dx + dy * dy <= 1.0,
        2 => (0.3..=1.0).contains(&(dx * dx + dy * dy)),
        3 => ax <= 0.3 || ay <= 0.3,
        4 => (ax - ay).abs() <= 0.3,
        5 => (dy - 0.6).abs() <= 0.25 || (dy + 0.6).abs() <= 0.25,
        6 => (dx - 0.6).abs() <= 0.25 || (dx + 0.6).abs() <= 0.25,
        7 => ax <= (dy + 1.0) / 2.0,
        8 => ax.max(ay) >= 0.6,
        9 => ax + ay <= 1.0,
        _ => unreachable!("class index checked by caller"),
    }
}

fn render(class: usize, side: usize, rng: &mut impl Rng) -> Array3<f32> {
    let mut img = Array3::<f32>::zeros((3, side, side));
    let base: [f32; 3] = [
        rng.random_range(0.05..0.35),
        rng.random_range(0.05..0.35),
        rng.random_range(0.05..0.35),
    ];
    for c in 0..3 {
        for v in img.index_axis_mut(ndarray::Axis(0), c).iter_mut() {
            *v = base[c] + rng.random_range(-0.08..0.08);
        }
    }
    let half = rng.random_range(0.2..0.32) * side as f32;
    let lo = half;
    let hi = side as f32 - half;
    let cy = rng.random_range(lo..hi);
    let cx = rng.random_range(lo..hi);
    let mut color = [
        rng.random_range(0.55..1.0f32),
        rng.random_range(0.55..1.0f32),
        rng.random_range(0.55..1.0f32),
    ];
    // one dim channel keeps colors saturated
    color[rng.random_range(0..3)] = rng.random_range(0.0..0.3);
    for y in 0..side {
        for x in 0..side {
            let dy = (y as f32 + 0.5 - cy) / half;
            let dx = (x as f32 + 0.5 - cx) / half;
            if inside(class, dx, dy) {
                for (c, &col) in color.iter().enumerate() {
                    img[[c, y, x]] = col;
                }
            }
        }
    }
    img.mapv_inplace(|v| quantize(v) as f32 / 255.0);
    img
}

fn split(name: &str, n: usize, side: usize, seed: u64, split_tag: u64) -> Result<Dataset> {
    let samples = (0..n)
        .map(|i| {
            let class = i % CLASSES;
            let mut rng = rng::stream(seed, Domain::Synthetic, split_tag, i as u64);
            let image = render(class, side, &mut rng);
            LabeledSample {
                id: i as u64,
                image,
                true_label: class,
                noisy_label: class,
            }
        })
        .collect();
    Dataset::new(name, CLASSES, ImageShape::new(3, side, side), samples)
}

/// Generates a class-balanced train/test pair.
pub fn generate(spec: &SyntheticSpec) -> Result<Splits> {
    if spec.side < 8 {
        return Err(SanmError::config("synthetic images need side >= 8"));
    }
    Ok(Splits {
        train: split("shapes", spec.train, spec.side, spec.seed, 0)?,
        test: split("shapes-test", spec.test, spec.side, spec.seed, 1)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let spec = SyntheticSpec {
            train: 40,
            test: 10,
            side: 16,
            seed: 3,
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
        let mut counts = [0; CLASSES];
        for s in &a.train.samples {
            counts[s.true_label] += 1;
        }
        assert!(counts.iter().all(|&c| c == 4));
    }

    #[test]
    fn every_shape_covers_some_pixels() {
        for class in 0..CLASSES {
            let mut hits = 0;
            for y in -10..=10 {
                for x in -10..=10 {
                    if inside(class, x as f32 / 10.0, y as f32 / 10.0) {
                        hits += 1;
                    }
                }
            }
            assert!(hits > 20, "{} too thin", SHAPE_NAMES[class]);
        }
    }
}
