//! Readers for the CIFAR binary distributions.
//!
//! CIFAR-10 records are one label byte followed by 3072 bytes of planar RGB
//! (1024 red, 1024 green, 1024 blue, row-major 32x32). CIFAR-100 records carry
//! a coarse and a fine label byte; the fine label is used.

use std::fs;
use std::path::Path;

use ndarray::Array3;

use super::{Dataset, ImageShape, LabeledSample, Splits};
use crate::error::{Result, SanmError};

pub const SIDE: usize = 32;
pub const IMAGE_BYTES: usize = 3 * SIDE * SIDE;

const CIFAR10_TRAIN: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

/// Parses a buffer of concatenated records. `label_bytes` is 1 for CIFAR-10
/// and 2 for CIFAR-100; the last label byte is the class.
pub fn parse_records(
    bytes: &[u8],
    label_bytes: usize,
    first_id: u64,
    path: &Path,
) -> Result<Vec<LabeledSample>> {
    let record = label_bytes + IMAGE_BYTES;
    if bytes.len() % record != 0 {
        return Err(SanmError::format(
            path,
            format!("length {} is not a multiple of the {record}-byte record", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(record)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[label_bytes - 1] as usize;
            let pixels = rec[label_bytes..].iter().map(|&b| b as f32 / 255.0).collect();
            LabeledSample {
                id: first_id + i as u64,
                image: Array3::from_shape_vec((3, SIDE, SIDE), pixels).expect("record size checked"),
                true_label: label,
                noisy_label: label,
            }
        })
        .collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| SanmError::io(path, e))
}

fn finish(name: &str, classes: usize, samples: Vec<LabeledSample>) -> Result<Dataset> {
    Dataset::new(name, classes, ImageShape::new(3, SIDE, SIDE), samples)
}

/// Loads `cifar-10-batches-bin` (the directory holding `data_batch_*.bin`).
pub fn load_cifar10(dir: &Path) -> Result<Splits> {
    let mut train = Vec::with_capacity(50_000);
    for name in CIFAR10_TRAIN {
        let path = dir.join(name);
        let recs = parse_records(&read(&path)?, 1, train.len() as u64, &path)?;
        train.extend(recs);
    }
    let test_path = dir.join("test_batch.bin");
    let test = parse_records(&read(&test_path)?, 1, 0, &test_path)?;
    Ok(Splits {
        train: finish("cifar10", 10, train)?,
        test: finish("cifar10-test", 10, test)?,
    })
}

/// Loads `cifar-100-binary` (the directory holding `train.bin` and `test.bin`).
pub fn load_cifar100(dir: &Path) -> Result<Splits> {
    let train_path = dir.join("train.bin");
    let test_path = dir.join("test.bin");
    let train = parse_records(&read(&train_path)?, 2, 0, &train_path)?;
    let test = parse_records(&read(&test_path)?, 2, 0, &test_path)?;
    Ok(Splits {
        train: finish("cifar100", 100, train)?,
        test: finish("cifar100-test", 100, test)?,
    })
}

/// Encodes samples back into CIFAR-10 style records (label byte = `label_of`).
pub fn encode_records(samples: &[LabeledSample], label_of: impl Fn(&LabeledSample) -> usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(samples.len() * (1 + IMAGE_BYTES));
    for s in samples {
        out.push(label_of(s) as u8);
        out.extend(s.image.iter().map(|&v| super::quantize(v)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_planar_layout_and_labels() {
        let mut rec = vec![7u8];
        rec.extend(std::iter::repeat_n(255u8, 1024));
        rec.extend(std::iter::repeat_n(0u8, 1024));
        rec.extend(std::iter::repeat_n(51u8, 1024));
        let samples = parse_records(&rec, 1, 40, Path::new("x")).unwrap();
        assert_eq!(samples.len(), 1);
        let s = &samples[0];
        assert_eq!((s.id, s.true_label, s.noisy_label), (40, 7, 7));
        assert_eq!(s.image[[0, 31, 31]], 1.0);
        assert_eq!(s.image[[1, 0, 0]], 0.0);
        assert!((s.image[[2, 5, 5]] - 0.2).abs() < 1e-7);
        assert_eq!(encode_records(&samples, |s| s.true_label), rec);
    }

    #[test]
    fn cifar100_uses_fine_label() {
        let mut rec = vec![3u8, 88u8];
        rec.extend(std::iter::repeat_n(0u8, IMAGE_BYTES));
        let s = parse_records(&rec, 2, 0, Path::new("x")).unwrap();
        assert_eq!(s[0].true_label, 88);
    }

    #[test]
    fn rejects_truncated_buffers() {
        assert!(parse_records(&[0u8; 100], 1, 0, Path::new("x")).is_err());
    }
}
