//! Labeled image datasets.
//!
//! Images are held as planar `(C, H, W)` arrays of `f32` in `[0, 1]`. Sample ids
//! are assigned once when a dataset is loaded and travel with the sample through
//! subsetting, noise injection, and serialization, so per-sample state can be
//! joined across epochs.

pub mod cifar;
pub mod store;
pub mod synthetic;

use ndarray::{Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SanmError};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub id: u64,
    /// Planar `(C, H, W)` image with values in `[0, 1]`.
    pub image: Array3<f32>,
    pub true_label: usize,
    pub noisy_label: usize,
}

impl LabeledSample {
    pub fn is_flipped(&self) -> bool {
        self.true_label != self.noisy_label
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        ImageShape {
            channels,
            height,
            width,
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub classes: usize,
    pub shape: ImageShape,
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        classes: usize,
        shape: ImageShape,
        samples: Vec<LabeledSample>,
    ) -> Result<Self> {
        let ds = Dataset {
            name: name.into(),
            classes,
            shape,
            samples,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Checks labels, image shapes, pixel range, and id uniqueness.
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(SanmError::invalid("a classification dataset needs at least 2 classes"));
        }
        let mut ids = std::collections::HashSet::with_capacity(self.samples.len());
        let expect = (self.shape.channels, self.shape.height, self.shape.width);
        for s in &self.samples {
            if s.true_label >= self.classes || s.noisy_label >= self.classes {
                return Err(SanmError::invalid(format!(
                    "sample {} has label outside [0, {})",
                    s.id, self.classes
                )));
            }
            if s.image.dim() != expect {
                return Err(SanmError::Shape(format!(
                    "sample {} has image shape {:?}, dataset expects {:?}",
                    s.id,
                    s.image.dim(),
                    expect
                )));
            }
            if s.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(SanmError::invalid(format!(
                    "sample {} has pixel values outside [0, 1]",
                    s.id
                )));
            }
            if !ids.insert(s.id) {
                return Err(SanmError::invalid(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(())
    }

    /// Stacks the selected images into an `(N, C, H, W)` batch.
    pub fn batch_images(&self, indices: &[usize]) -> Array4<f32> {
        let views: Vec<ArrayView3<f32>> = indices.iter().map(|&i| self.samples[i].image.view()).collect();
        if views.is_empty() {
            let s = self.shape;
            return Array4::zeros((0, s.channels, s.height, s.width));
        }
        ndarray::stack(Axis(0), &views).expect("images share the dataset shape")
    }

    pub fn noisy_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].noisy_label).collect()
    }

    pub fn true_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.samples[i].true_label).collect()
    }

    /// Keeps the first `per_class` samples of each class (by true label), in
    /// dataset order.
    pub fn balanced_subset(&self, per_class: usize) -> Dataset {
        let mut counts = vec![0usize; self.classes];
        let samples = self
            .samples
            .iter()
            .filter(|s| {
                let c = &mut counts[s.true_label];
                *c += 1;
                *c <= per_class
            })
            .cloned()
            .collect();
        Dataset {
            name: self.name.clone(),
            classes: self.classes,
            shape: self.shape,
            samples,
        }
    }

    /// Fraction of samples whose noisy label differs from the true label.
    pub fn flip_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().filter(|s| s.is_flipped()).count() as f64 / self.samples.len() as f64
    }

    /// SHA-256 over ids, labels, and 8-bit quantized pixels.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.classes.to_le_bytes());
        for s in &self.samples {
            h.update(s.id.to_le_bytes());
            h.update((s.true_label as u32).to_le_bytes());
            h.update((s.noisy_label as u32).to_le_bytes());
            let bytes: Vec<u8> = s.image.iter().map(|&v| quantize(v)).collect();
            h.update(&bytes);
        }
        format!("{:x}", h.finalize())
    }
}

/// A train/test pair as produced by the loaders. Test labels are clean.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: u64, label: usize) -> LabeledSample {
        LabeledSample {
            id,
            image: Array3::from_elem((1, 2, 2), 0.5),
            true_label: label,
            noisy_label: label,
        }
    }

    #[test]
    fn rejects_out_of_range_labels_and_pixels() {
        let shape = ImageShape::new(1, 2, 2);
        let mut bad = sample(0, 3);
        assert!(Dataset::new("t", 3, shape, vec![bad.clone()]).is_err());
        bad.true_label = 1;
        bad.noisy_label = 1;
        bad.image[[0, 0, 0]] = 1.5;
        assert!(Dataset::new("t", 3, shape, vec![bad]).is_err());
        assert!(Dataset::new("t", 3, shape, vec![sample(1, 0), sample(1, 2)]).is_err());
    }

    #[test]
    fn balanced_subset_keeps_order_and_ids() {
        let shape = ImageShape::new(1, 2, 2);
        let samples = (0..12).map(|i| sample(i, (i % 3) as usize)).collect();
        let ds = Dataset::new("t", 3, shape, samples).unwrap();
        let sub = ds.balanced_subset(2);
        let ids: Vec<u64> = sub.samples.iter().map(|s| s.id).collect();
        assert_eq!(ids, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn batch_stacks_in_index_order() {
        let shape = ImageShape::new(1, 2, 2);
        let mut samples: Vec<_> = (0..3).map(|i| sample(i, 0)).collect();
        samples[2].image.fill(0.25);
        let ds = Dataset::new("t", 2, shape, samples).unwrap();
        let b = ds.batch_images(&[2, 0]);
        assert_eq!(b.dim(), (2, 1, 2, 2));
        assert_eq!(b[[0, 0, 1, 1]], 0.25);
        assert_eq!(b[[1, 0, 1, 1]], 0.5);
    }
}
