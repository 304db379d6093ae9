//! Noisy-label regularization of pseudo labels, and the soft-target
//! cross-entropy used as the classification loss.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SanmError};
use crate::nn::Real;

/// Probability vector over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelVector {
    pub probs: Vec<f64>,
}

impl LabelVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(SanmError::invalid("empty label vector"));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(SanmError::invalid("label vector entries must be finite and non-negative"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(SanmError::invalid(format!("label vector sums to {sum}, not 1")));
        }
        Ok(LabelVector { probs })
    }

    pub fn one_hot(class: usize, classes: usize) -> Self {
        let mut probs = vec![0.0; classes];
        probs[class] = 1.0;
        LabelVector { probs }
    }

    pub fn uniform(classes: usize) -> Self {
        LabelVector {
            probs: vec![1.0 / classes as f64; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.probs.len()
    }

    /// Index of the largest entry, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Moves `r` of the top class's mass onto all `c` classes uniformly:
/// `base[k] - r + r/c` at the argmax, `base[j] + r/c` elsewhere.
///
/// If the argmax entry would go negative it is clamped to zero and the vector
/// renormalized.
pub fn regularize_label(base: &LabelVector, r: f64) -> Result<LabelVector> {
    if !(0.0..=1.0).contains(&r) {
        return Err(SanmError::invalid(format!("mask ratio {r} outside [0, 1]")));
    }
    let c = base.classes();
    let k = base.argmax();
    let share = r / c as f64;
    let mut probs: Vec<f64> = base.probs.iter().map(|p| p + share).collect();
    probs[k] -= r;
    if probs[k] < 0.0 {
        probs[k] = 0.0;
        let sum: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= sum);
    }
    Ok(LabelVector { probs })
}

pub const LOG_FLOOR: f64 = 1e-12;

/// Cross-entropy `-sum_j target_j * ln(pred_j)` with `pred` floored at 1e-12.
pub fn classification_loss(pred: &LabelVector, target: &LabelVector) -> Result<f64> {
    if pred.classes() != target.classes() {
        return Err(SanmError::Shape(format!(
            "prediction has {} classes, target {}",
            pred.classes(),
            target.classes()
        )));
    }
    Ok(pred
        .probs
        .iter()
        .zip(&target.probs)
        .map(|(&p, &t)| if t == 0.0 { 0.0 } else { -t * p.max(LOG_FLOOR).ln() })
        .sum::<f64>()
        .max(0.0))
}

/// Batched soft-target cross-entropy on logits `(N, K)`.
///
/// Returns the per-sample losses and the gradient of their *mean* with
/// respect to the logits.
pub fn soft_cross_entropy<T: Real>(logits: ArrayView2<T>, targets: ArrayView2<T>) -> (Vec<T>, Array2<T>) {
    assert_eq!(logits.dim(), targets.dim(), "logits and targets disagree");
    let n = logits.nrows();
    let inv_n = T::one() / T::from_usize(n.max(1)).unwrap();
    let mut grad = Array2::<T>::zeros(logits.dim());
    let mut losses = Vec::with_capacity(n);
    for ((row, t), mut g) in logits
        .axis_iter(Axis(0))
        .zip(targets.axis_iter(Axis(0)))
        .zip(grad.axis_iter_mut(Axis(0)))
    {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z = row.iter().map(|&l| (l - m).exp()).fold(T::zero(), |a, b| a + b);
        let log_z = z.ln() + m;
        let t_sum = t.iter().copied().fold(T::zero(), |a, b| a + b);
        let mut loss = T::zero();
        for ((&l, &tj), gj) in row.iter().zip(t.iter()).zip(g.iter_mut()) {
            let log_p = l - log_z;
            if tj != T::zero() {
                loss = loss - tj * log_p;
            }
            *gj = (log_p.exp() * t_sum - tj) * inv_n;
        }
        losses.push(loss);
    }
    (losses, grad)
}
