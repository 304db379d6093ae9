//! Checkpoints: a binary weight file plus a plain-text manifest.
//!
//! `<name>.bin` holds a magic tag, a version, and length-prefixed little-endian
//! `f32` sections (encoder state, decoder state). `<name>.txt` lists
//! `key = value` lines including a SHA-256 of the weight file.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{Decoder, Encoder, Module};
use crate::error::{Result, SanmError};

const MAGIC: &[u8; 8] = b"SANMCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub architecture: String,
    pub epoch: usize,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub info: CheckpointInfo,
    pub encoder: Vec<f32>,
    pub decoder: Vec<f32>,
}

impl Checkpoint {
    pub fn capture(info: CheckpointInfo, encoder: &mut Encoder<f32>, decoder: Option<&mut Decoder<f32>>) -> Self {
        Checkpoint {
            info,
            encoder: encoder.state(),
            decoder: decoder.map(|d| d.state()).unwrap_or_default(),
        }
    }

    pub fn restore(&self, encoder: &mut Encoder<f32>, decoder: Option<&mut Decoder<f32>>) -> Result<()> {
        encoder.load_state(&self.encoder)?;
        if let Some(d) = decoder {
            d.load_state(&self.decoder)?;
        }
        Ok(())
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * (self.encoder.len() + self.decoder.len()) + 16);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for section in [&self.encoder, &self.decoder] {
            out.extend_from_slice(&(section.len() as u64).to_le_bytes());
            for v in section.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Writes `<dir>/<name>.bin` and `<dir>/<name>.txt`; returns the weight path.
    pub fn save(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| SanmError::io(dir, e))?;
        let bin = dir.join(format!("{name}.bin"));
        let bytes = self.encode();
        fs::write(&bin, &bytes).map_err(|e| SanmError::io(&bin, e))?;
        let manifest = format!(
            "architecture = {}\nepoch = {}\nconfig_hash = {}\nencoder_values = {}\ndecoder_values = {}\nsha256 = {:x}\n",
            self.info.architecture,
            self.info.epoch,
            self.info.config_hash,
            self.encoder.len(),
            self.decoder.len(),
            Sha256::digest(&bytes)
        );
        let txt = dir.join(format!("{name}.txt"));
        fs::write(&txt, manifest).map_err(|e| SanmError::io(&txt, e))?;
        Ok(bin)
    }

    /// Loads a checkpoint from its weight path, verifying the manifest digest.
    pub fn load(bin: &Path) -> Result<Self> {
        let bytes = fs::read(bin).map_err(|e| SanmError::io(bin, e))?;
        let txt = bin.with_extension("txt");
        let manifest = fs::read_to_string(&txt).map_err(|e| SanmError::io(&txt, e))?;
        let field = |key: &str| -> Result<String> {
            manifest
                .lines()
                .filter_map(|l| l.split_once('='))
                .find(|(k, _)| k.trim() == key)
                .map(|(_, v)| v.trim().to_string())
                .ok_or_else(|| SanmError::format(&txt, format!("missing `{key}`")))
        };
        if field("sha256")? != format!("{:x}", Sha256::digest(&bytes)) {
            return Err(SanmError::format(bin, "weights do not match the manifest digest"));
        }
        let bad = |reason: &str| SanmError::format(bin, reason.to_string());
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let mut pos = 12;
        let mut sections = Vec::new();
        for _ in 0..2 {
            let len_bytes = bytes.get(pos..pos + 8).ok_or_else(|| bad("truncated header"))?;
            let len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes")) as usize;
            pos += 8;
            let body = bytes.get(pos..pos + 4 * len).ok_or_else(|| bad("truncated weights"))?;
            sections.push(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect::<Vec<_>>(),
            );
            pos += 4 * len;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let decoder = sections.pop().expect("two sections");
        let encoder = sections.pop().expect("two sections");
        let info = CheckpointInfo {
            architecture: field("architecture")?,
            epoch: field("epoch")?
                .parse()
                .map_err(|_| SanmError::format(&txt, "epoch is not an integer"))?,
            config_hash: field("config_hash")?,
        };
        Ok(Checkpoint { info, encoder, decoder })
    }
}
