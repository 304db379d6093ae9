//! Boundary to the host noisy-label method that consumes masked images.
//!
//! A host receives, for every training batch, the (possibly masked) images,
//! the targets built for them, and the encoder's logits on those images, and
//! returns a loss with its gradient w.r.t. the logits. Only plain cross-entropy
//! ships; sample-selection or co-training methods can plug in here.

use ndarray::{Array2, Array4};

use crate::error::{Result, SanmError};
use crate::label_reg::soft_cross_entropy;

pub struct HostBatch<'a> {
    pub epoch: usize,
    pub sample_ids: &'a [u64],
    /// `(N, C, H, W)` in `[0, 1]`, before input normalization.
    pub images: &'a Array4<f32>,
    /// `(N, K)` target distributions (regularized when label regularization is on).
    pub targets: &'a Array2<f32>,
    /// `(N, K)` encoder logits on `images`.
    pub logits: &'a Array2<f32>,
}

#[derive(Debug, Clone)]
pub struct HostLoss {
    /// Mean over the batch.
    pub loss: f64,
    pub per_sample: Vec<f64>,
    /// Gradient of `loss` with respect to the logits.
    pub dlogits: Array2<f32>,
}

pub trait HostMethod {
    fn name(&self) -> &str;

    fn batch_loss(&mut self, batch: &HostBatch<'_>) -> Result<HostLoss>;
}

/// Soft-target cross-entropy.
#[derive(Debug, Clone, Copy, Default)]
pub struct CeHost;

impl HostMethod for CeHost {
    fn name(&self) -> &str {
        "ce"
    }

    fn batch_loss(&mut self, batch: &HostBatch<'_>) -> Result<HostLoss> {
        if batch.logits.dim() != batch.targets.dim() {
            return Err(SanmError::Shape(format!(
                "logits {:?} vs targets {:?}",
                batch.logits.dim(),
                batch.targets.dim()
            )));
        }
        let (losses, dlogits) = soft_cross_entropy(batch.logits.view(), batch.targets.view());
        let per_sample: Vec<f64> = losses.iter().map(|&l| l as f64).collect();
        let loss = per_sample.iter().sum::<f64>() / per_sample.len().max(1) as f64;
        Ok(HostLoss {
            loss,
            per_sample,
            dlogits,
        })
    }
}
