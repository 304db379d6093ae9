//! Two-component Gaussian mixture over per-sample training losses.
//!
//! Losses are min-max normalized to `[0, 1]` for each fit. EM starts from the
//! 10th/90th percentiles with a shared variance and equal weights, so a fit is
//! a deterministic function of its inputs. The low-mean component is the
//! "clean" one; its posterior for a sample is that sample's clean probability.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SanmError};

pub const MAX_ITERATIONS: usize = 100;
/// Convergence threshold on the change in mean per-sample log-likelihood.
pub const TOLERANCE: f64 = 1e-6;
pub const VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub sample_id: u64,
    pub loss: f64,
    pub epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleanProbability {
    pub sample_id: u64,
    pub g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    /// Component means in normalized loss units.
    pub means: [f64; 2],
    pub variances: [f64; 2],
    pub weights: [f64; 2],
    pub clean_component: usize,
    /// Set when the losses carry no separable signal; every posterior is then 0.5.
    pub degenerate: bool,
    /// Normalization range of the raw losses.
    pub loss_min: f64,
    pub loss_max: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Mean per-sample log-likelihood after each E-step.
    pub log_likelihood: Vec<f64>,
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln() + d * d / var)
}

fn log_sum_exp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

impl GmmFit {
    /// Builds a fit from explicit parameters in normalized units.
    pub fn from_params(means: [f64; 2], variances: [f64; 2], weights: [f64; 2], range: (f64, f64)) -> Self {
        GmmFit {
            means,
            variances,
            weights,
            clean_component: if means[1] < means[0] { 1 } else { 0 },
            degenerate: false,
            loss_min: range.0,
            loss_max: range.1,
            iterations: 0,
            converged: true,
            log_likelihood: Vec::new(),
        }
    }

    fn degenerate(value: f64) -> Self {
        GmmFit {
            means: [0.0, 0.0],
            variances: [VARIANCE_FLOOR, VARIANCE_FLOOR],
            weights: [0.5, 0.5],
            clean_component: 0,
            degenerate: true,
            loss_min: value,
            loss_max: value,
            iterations: 0,
            converged: true,
            log_likelihood: Vec::new(),
        }
    }

    pub fn normalize(&self, loss: f64) -> f64 {
        (loss - self.loss_min) / (self.loss_max - self.loss_min)
    }

    /// Clean and noisy means mapped back to raw loss units.
    pub fn raw_means(&self) -> [f64; 2] {
        let span = self.loss_max - self.loss_min;
        let c = self.clean_component;
        [self.loss_min + self.means[c] * span, self.loss_min + self.means[1 - c] * span]
    }
}

/// Fits the mixture to one epoch's loss records.
pub fn fit_gmm(losses: &[LossRecord]) -> Result<GmmFit> {
    let values: Vec<f64> = losses.iter().map(|r| r.loss).collect();
    fit_gmm_values(&values)
}

pub fn fit_gmm_values(losses: &[f64]) -> Result<GmmFit> {
    if losses.is_empty() {
        return Err(SanmError::invalid("cannot fit a mixture to zero losses"));
    }
    if let Some(bad) = losses.iter().find(|l| !l.is_finite() || **l < 0.0) {
        return Err(SanmError::invalid(format!("loss {bad} is not a finite non-negative value")));
    }
    let lo = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return Ok(GmmFit::degenerate(lo));
    }
    let span = hi - lo;
    let x: Vec<f64> = losses.iter().map(|l| (l - lo) / span).collect();
    let n = x.len() as f64;

    let mut sorted = x.clone();
    sorted.sort_by(f64::total_cmp);
    let (mut m0, mut m1) = (percentile(&sorted, 0.1), percentile(&sorted, 0.9));
    if m1 - m0 <= 0.0 {
        // mass concentrated at one value; fall back to the extremes
        m0 = 0.0;
        m1 = 1.0;
    }
    let mean = x.iter().sum::<f64>() / n;
    let var = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).max(VARIANCE_FLOOR);

    let mut means = [m0, m1];
    let mut vars = [var, var];
    let mut weights = [0.5f64, 0.5];
    let mut trace: Vec<f64> = Vec::with_capacity(MAX_ITERATIONS);
    let mut resp = vec![0.0f64; x.len()];
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..MAX_ITERATIONS {
        // E-step: responsibility of component 0
        let (lw0, lw1) = (weights[0].ln(), weights[1].ln());
        let mut ll = 0.0f64;
        for (r, &xi) in resp.iter_mut().zip(&x) {
            let a = lw0 + log_normal(xi, means[0], vars[0]);
            let b = lw1 + log_normal(xi, means[1], vars[1]);
            let z = log_sum_exp2(a, b);
            ll += z;
            *r = (a - z).exp();
        }
        let ll = ll / n;
        if let Some(&prev) = trace.last() {
            if (ll - prev).abs() < TOLERANCE {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);

        // M-step
        let n0: f64 = resp.iter().sum();
        let n1 = n - n0;
        if n0 < 1e-12 || n1 < 1e-12 {
            // one component has no support left; parameters are a fixed point
            converged = true;
            break;
        }
        let mu0 = resp.iter().zip(&x).map(|(r, v)| r * v).sum::<f64>() / n0;
        let mu1 = resp.iter().zip(&x).map(|(r, v)| (1.0 - r) * v).sum::<f64>() / n1;
        let v0 = resp.iter().zip(&x).map(|(r, v)| r * (v - mu0).powi(2)).sum::<f64>() / n0;
        let v1 = resp.iter().zip(&x).map(|(r, v)| (1.0 - r) * (v - mu1).powi(2)).sum::<f64>() / n1;
        means = [mu0, mu1];
        vars = [v0.max(VARIANCE_FLOOR), v1.max(VARIANCE_FLOOR)];
        weights = [n0 / n, n1 / n];
        iterations += 1;
    }

    let mut fit = GmmFit::from_params(means, vars, weights, (lo, hi));
    fit.iterations = iterations;
    fit.converged = converged;
    fit.log_likelihood = trace;
    Ok(fit)
}

/// Posterior probability that a raw `loss` came from the clean component.
pub fn posterior_clean(fit: &GmmFit, loss: f64) -> f64 {
    if fit.degenerate || loss.is_nan() {
        return 0.5;
    }
    let x = fit.normalize(loss);
    let c = fit.clean_component;
    let a = fit.weights[c].ln() + log_normal(x, fit.means[c], fit.variances[c]);
    let b = fit.weights[1 - c].ln() + log_normal(x, fit.means[1 - c], fit.variances[1 - c]);
    let g = (a - log_sum_exp2(a, b)).exp();
    if g.is_nan() {
        // both densities underflowed to -inf at an infinite loss
        return if loss > fit.loss_max { 0.0 } else { 1.0 };
    }
    g.clamp(0.0, 1.0)
}

pub fn clean_probabilities(fit: &GmmFit, records: &[LossRecord]) -> Vec<CleanProbability> {
    records
        .iter()
        .map(|r| CleanProbability {
            sample_id: r.sample_id,
            g: posterior_clean(fit, r.loss),
        })
        .collect()
}
