//! Top-1 accuracy on clean test labels.

use serde::{Deserialize, Serialize};

use super::Normalizer;
use crate::activation::argmax;
use crate::data::Dataset;
use crate::error::{Result, SanmError};
use crate::exec::Exec;
use crate::nn::{Ctx, Encoder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Accuracy per true class; `None` for classes absent from the test set.
    pub per_class: Vec<Option<f64>>,
    pub correct: usize,
    pub total: usize,
}

pub fn score_predictions(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Evaluation> {
    if labels.is_empty() {
        return Err(SanmError::invalid("cannot evaluate on an empty test set"));
    }
    if predictions.len() != labels.len() {
        return Err(SanmError::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut hits = vec![0usize; classes];
    let mut seen = vec![0usize; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= classes {
            return Err(SanmError::invalid(format!("label {y} outside [0, {classes})")));
        }
        seen[y] += 1;
        hits[y] += usize::from(p == y);
    }
    let correct: usize = hits.iter().sum();
    Ok(Evaluation {
        accuracy: correct as f64 / labels.len() as f64,
        per_class: hits
            .iter()
            .zip(&seen)
            .map(|(&h, &s)| (s > 0).then(|| h as f64 / s as f64))
            .collect(),
        correct,
        total: labels.len(),
    })
}

pub fn predict(
    encoder: &mut Encoder<f32>,
    data: &Dataset,
    norm: &Normalizer,
    batch_size: usize,
    exec: Exec,
) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let x = norm.apply(&data.batch_images(chunk));
        let logits = encoder.forward(&x, &Ctx::eval(exec))?.logits;
        out.extend(logits.rows().into_iter().map(|r| argmax(r.as_slice().expect("contiguous logits"))));
    }
    Ok(out)
}

/// Accuracy against `true_label`.
pub fn evaluate(
    encoder: &mut Encoder<f32>,
    test: &Dataset,
    norm: &Normalizer,
    batch_size: usize,
    exec: Exec,
) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(SanmError::invalid("cannot evaluate on an empty test set"));
    }
    let preds = predict(encoder, test, norm, batch_size, exec)?;
    let labels: Vec<usize> = test.samples.iter().map(|s| s.true_label).collect();
    score_predictions(&preds, &labels, test.classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn perfect_predictions() {
        let y = vec![0, 1, 2, 1];
        let e = score_predictions(&y, &y, 3).unwrap();
        assert_eq!(e.accuracy, 1.0);
        assert_eq!(e.per_class, vec![Some(1.0); 3]);
    }

    #[test]
    fn uniform_random_predictor_is_near_chance() {
        let c = 10;
        let n = 10_000;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let acc = score_predictions(&preds, &labels, c).unwrap().accuracy;
        let sigma = (0.1f64 * 0.9 / n as f64).sqrt();
        assert!((acc - 0.1).abs() < 3.0 * sigma, "{acc}");
    }

    #[test]
    fn empty_test_set_is_rejected() {
        assert!(score_predictions(&[], &[], 10).is_err());
    }
}
