//! Self-supervised reconstruction of the original image from masked-image
//! features, and the loss bookkeeping around it.

use ndarray::{Array, Array4, ArrayBase, Data, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SanmError};
use crate::exec::Exec;
use crate::nn::{to_batch_major, Ctx, Decoder, Real};

/// Encoder features of masked images in engine layout `(C, N, Hf, Wf)`.
#[derive(Debug, Clone)]
pub struct LatentFeature<T: Real> {
    pub tensor: Array4<T>,
}

impl<T: Real> LatentFeature<T> {
    pub fn new(tensor: Array4<T>) -> Result<Self> {
        if !tensor.iter().all(|v| v.is_finite()) {
            return Err(SanmError::NonFinite { stage: "latent feature".into() });
        }
        Ok(LatentFeature { tensor })
    }
}

/// Decoded images `(N, C, H, W)`.
#[derive(Debug, Clone)]
pub struct Reconstruction<T: Real> {
    pub image: Array4<T>,
}

pub fn reconstruct<T: Real>(latent: &LatentFeature<T>, decoder: &mut Decoder<T>, exec: Exec) -> Result<Reconstruction<T>> {
    let out = decoder.forward(&latent.tensor, &Ctx::eval(exec))?;
    Ok(Reconstruction { image: to_batch_major(&out) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconTarget {
    /// Mean over every pixel and channel.
    #[default]
    AllPixels,
    /// Mean over masked pixels only.
    MaskedOnly,
}

fn check_shapes(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(SanmError::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Mean squared error between a reconstruction and the original.
pub fn reconstruction_loss<T, S1, S2, D>(recon: &ArrayBase<S1, D>, original: &ArrayBase<S2, D>) -> Result<f64>
where
    T: Real,
    S1: Data<Elem = T>,
    S2: Data<Elem = T>,
    D: Dimension,
{
    check_shapes(recon.shape(), original.shape(), "reconstruction and original differ")?;
    if recon.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0f64;
    Zip::from(recon).and(original).for_each(|&a, &b| {
        let d = (a - b).as_f64();
        sum += d * d;
    });
    Ok(sum / recon.len() as f64)
}

/// Loss and its gradient with respect to `recon`.
///
/// `mask` (same shape, 1 inside masked rectangles) restricts the mean to masked
/// entries under [`ReconTarget::MaskedOnly`]; with no masked entries the loss
/// and gradient are zero.
pub fn reconstruction_loss_grad<T: Real, D: Dimension>(
    recon: &Array<T, D>,
    original: &Array<T, D>,
    target: ReconTarget,
    mask: Option<&Array<T, D>>,
) -> Result<(f64, Array<T, D>)> {
    check_shapes(recon.shape(), original.shape(), "reconstruction and original differ")?;
    let mut diff = recon - original;
    let count = match target {
        ReconTarget::AllPixels => recon.len() as f64,
        ReconTarget::MaskedOnly => {
            let m = mask.ok_or_else(|| SanmError::invalid("masked-only reconstruction needs a mask"))?;
            check_shapes(m.shape(), recon.shape(), "mask and reconstruction differ")?;
            diff *= m;
            m.iter().filter(|v| **v != T::zero()).count() as f64
        }
    };
    if count == 0.0 {
        return Ok((0.0, Array::zeros(recon.raw_dim())));
    }
    let loss = diff.iter().map(|d| d.as_f64() * d.as_f64()).sum::<f64>() / count;
    let scale = T::lit(2.0 / count);
    diff.mapv_inplace(|d| d * scale);
    Ok((loss, diff))
}

/// `l_c + beta * l_r`.
pub fn combined_loss(l_c: f64, l_r: f64, beta: f64) -> f64 {
    debug_assert!(l_c >= 0.0 && l_r >= 0.0, "losses must be non-negative");
    l_c + beta * l_r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_c: f64,
    pub l_r: f64,
    pub beta: f64,
    pub l_train: f64,
}

impl LossBundle {
    pub fn new(l_c: f64, l_r: f64, beta: f64) -> Self {
        LossBundle {
            l_c,
            l_r,
            beta,
            l_train: combined_loss(l_c, l_r, beta),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};
    use rand::{Rng, SeedableRng};

    #[test]
    fn identical_images_have_zero_loss() {
        let a = Array3::from_shape_fn((3, 4, 4), |(c, y, x)| (c + y + x) as f64 / 10.0);
        assert_eq!(reconstruction_loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset() {
        let a = Array3::from_elem((3, 8, 8), 0.4f64);
        let b = &a + 0.1;
        assert!((reconstruction_loss(&b, &a).unwrap() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn half_grey_against_uniform_noise_is_one_twelfth() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let orig = Array2::from_shape_simple_fn((400, 500), || rng.random::<f64>());
        let grey = Array2::from_elem((400, 500), 0.5);
        let l = reconstruction_loss(&grey, &orig).unwrap();
        // sd of the estimator is about 0.0745 / sqrt(2e5) = 1.7e-4
        assert!((l - 1.0 / 12.0).abs() < 1e-3, "{l}");
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Array3::<f64>::zeros((3, 4, 4));
        let b = Array3::<f64>::zeros((3, 4, 5));
        assert!(reconstruction_loss(&a, &b).is_err());
    }

    #[test]
    fn gradient_matches_definition() {
        let a = Array2::from_shape_vec((1, 3), vec![0.2f64, 0.5, 0.9]).unwrap();
        let b = Array2::from_shape_vec((1, 3), vec![0.0f64, 0.5, 1.0]).unwrap();
        let (l, g) = reconstruction_loss_grad(&a, &b, ReconTarget::AllPixels, None).unwrap();
        assert!((l - (0.04 + 0.01) / 3.0).abs() < 1e-12);
        assert!((g[[0, 0]] - 2.0 * 0.2 / 3.0).abs() < 1e-12);
        assert_eq!(g[[0, 1]], 0.0);
    }

    #[test]
    fn masked_only_mode_averages_over_the_mask() {
        let a = Array2::from_elem((2, 2), 1.0f64);
        let b = Array2::zeros((2, 2));
        let m = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let (l, g) = reconstruction_loss_grad(&a, &b, ReconTarget::MaskedOnly, Some(&m)).unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(g[[0, 0]], 2.0);
        assert_eq!(g[[1, 1]], 0.0);
        let none = Array2::zeros((2, 2));
        assert_eq!(reconstruction_loss_grad(&a, &b, ReconTarget::MaskedOnly, Some(&none)).unwrap().0, 0.0);
    }

    #[test]
    fn combined_loss_examples() {
        assert_eq!(combined_loss(0.7, 0.3, 0.0), 0.7);
        assert!((combined_loss(0.7, 0.05, 1.0) - 0.75).abs() < 1e-15);
        assert_eq!(combined_loss(0.0, 0.0, 1.0), 0.0);
    }
}
