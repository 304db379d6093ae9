//! Adversarial noisy masking for training image classifiers on noisily
//! labeled data.
//!
//! The pipeline per epoch: fit a two-component mixture to per-sample losses to
//! get each sample's clean probability ([`gmm`]); per batch, locate the most and
//! least class-relevant regions with activation maps ([`activation`]), mask them
//! with ratios driven by the clean probability ([`masking`]), train on the
//! masked images against regularized labels ([`label_reg`]), and reconstruct the
//! originals from the masked-image features ([`reconstruction`]). [`trainer`]
//! runs the loop; [`nn`] is the CPU network engine underneath.

pub mod activation;
pub mod data;
pub mod error;
pub mod exec;
pub mod gmm;
pub mod label_reg;
pub mod masking;
pub mod nn;
pub mod noise;
pub mod reconstruction;
pub mod rng;
pub mod trainer;

pub use error::{Result, SanmError};
pub use exec::Exec;
