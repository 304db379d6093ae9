//! On-disk layout for (noisy) datasets.
//!
//! ```text
//! <dir>/index.jsonl        header line, then one {id, true_label, noisy_label} per sample
//! <dir>/images.bin         CIFAR-style records: true-label byte + planar u8 pixels
//! <dir>/test_index.jsonl   same, for the clean test split
//! <dir>/test_images.bin
//! <dir>/noise.json         the NoiseSpec that produced the noisy labels (optional)
//! <dir>/report.json        NoiseReport for the train split (optional)
//! ```
//!
//! Records in the index and the image file appear in the same order.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{Dataset, ImageShape, LabeledSample, Splits};
use crate::error::{Result, SanmError};
use crate::noise::{NoiseReport, NoiseSpec};

pub const INDEX_SCHEMA: &str = "sanm.dataset-index";
pub const INDEX_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexHeader {
    pub schema: String,
    pub version: u32,
    pub name: String,
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexRecord {
    pub id: u64,
    pub true_label: usize,
    pub noisy_label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoredDataset {
    pub splits: Splits,
    pub noise: Option<NoiseSpec>,
    pub report: Option<NoiseReport>,
}

fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| SanmError::io(path, e))
}

fn write_split(dir: &Path, prefix: &str, ds: &Dataset) -> Result<()> {
    if ds.classes > 256 {
        return Err(SanmError::invalid("the record layout stores labels in one byte"));
    }
    let index_path = dir.join(format!("{prefix}index.jsonl"));
    let file = fs::File::create(&index_path).map_err(|e| SanmError::io(&index_path, e))?;
    let mut w = BufWriter::new(file);
    let header = IndexHeader {
        schema: INDEX_SCHEMA.into(),
        version: INDEX_VERSION,
        name: ds.name.clone(),
        classes: ds.classes,
        channels: ds.shape.channels,
        height: ds.shape.height,
        width: ds.shape.width,
        count: ds.len(),
    };
    let io = |e| SanmError::io(&index_path, e);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(io)?;
    for s in &ds.samples {
        let rec = IndexRecord {
            id: s.id,
            true_label: s.true_label,
            noisy_label: s.noisy_label,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)?;

    let images_path = dir.join(format!("{prefix}images.bin"));
    let bytes = super::cifar::encode_records(&ds.samples, |s| s.true_label);
    fs::write(&images_path, bytes).map_err(|e| SanmError::io(&images_path, e))
}

fn read_split(dir: &Path, prefix: &str) -> Result<Dataset> {
    let index_path = dir.join(format!("{prefix}index.jsonl"));
    let file = fs::File::open(&index_path).map_err(|e| SanmError::io(&index_path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| SanmError::format(&index_path, "empty index"))?
        .map_err(|e| SanmError::io(&index_path, e))?;
    let header: IndexHeader = serde_json::from_str(&first)
        .map_err(|e| SanmError::format(&index_path, format!("bad header: {e}")))?;
    if header.schema != INDEX_SCHEMA || header.version != INDEX_VERSION {
        return Err(SanmError::format(
            &index_path,
            format!("unsupported schema {} v{}", header.schema, header.version),
        ));
    }
    let mut records = Vec::with_capacity(header.count);
    for line in lines {
        let line = line.map_err(|e| SanmError::io(&index_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: IndexRecord = serde_json::from_str(&line)
            .map_err(|e| SanmError::format(&index_path, format!("bad record: {e}")))?;
        records.push(rec);
    }
    if records.len() != header.count {
        return Err(SanmError::format(
            &index_path,
            format!("header says {} records, found {}", header.count, records.len()),
        ));
    }

    let images_path = dir.join(format!("{prefix}images.bin"));
    let bytes = fs::read(&images_path).map_err(|e| SanmError::io(&images_path, e))?;
    let shape = ImageShape::new(header.channels, header.height, header.width);
    let rec_len = 1 + shape.len();
    if bytes.len() != rec_len * records.len() {
        return Err(SanmError::format(
            &images_path,
            format!("expected {} bytes, found {}", rec_len * records.len(), bytes.len()),
        ));
    }
    let samples = records
        .iter()
        .zip(bytes.chunks_exact(rec_len))
        .map(|(rec, chunk)| {
            if chunk[0] as usize != rec.true_label {
                return Err(SanmError::format(
                    &images_path,
                    format!("label byte disagrees with index for sample {}", rec.id),
                ));
            }
            let pixels = chunk[1..].iter().map(|&b| b as f32 / 255.0).collect();
            Ok(LabeledSample {
                id: rec.id,
                image: Array3::from_shape_vec((shape.channels, shape.height, shape.width), pixels)
                    .expect("length checked"),
                true_label: rec.true_label,
                noisy_label: rec.noisy_label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(header.name, header.classes, shape, samples)
}

/// Writes `splits` (and the noise provenance, when given) into `dir`.
pub fn save(dir: &Path, splits: &Splits, noise: Option<&NoiseSpec>, report: Option<&NoiseReport>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SanmError::io(dir, e))?;
    write_split(dir, "", &splits.train)?;
    write_split(dir, "test_", &splits.test)?;
    if let Some(spec) = noise {
        write_json_file(&dir.join("noise.json"), spec)?;
    }
    if let Some(report) = report {
        write_json_file(&dir.join("report.json"), report)?;
    }
    Ok(())
}

pub fn load(dir: &Path) -> Result<StoredDataset> {
    let train = read_split(dir, "")?;
    let test = read_split(dir, "test_")?;
    let read_opt = |name: &str| -> Result<Option<String>> {
        let p: PathBuf = dir.join(name);
        if p.exists() {
            fs::read_to_string(&p).map(Some).map_err(|e| SanmError::io(&p, e))
        } else {
            Ok(None)
        }
    };
    let noise = read_opt("noise.json")?.map(|t| serde_json::from_str(&t)).transpose()?;
    let report = read_opt("report.json")?.map(|t| serde_json::from_str(&t)).transpose()?;
    Ok(StoredDataset {
        splits: Splits { train, test },
        noise,
        report,
    })
}
