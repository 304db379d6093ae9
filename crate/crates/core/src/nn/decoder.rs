//! Lightweight decoder mapping the encoder's tapped features back to pixels.

use ndarray::Array4;

use super::layers::{Conv2d, Relu, Upsample2x};
use super::{to_batch_major, Ctx, Layer, Module, Param, Real, Sequential};
use crate::data::ImageShape;
use crate::error::{Result, SanmError};
use crate::rng::{stream, Domain};

/// `conv-relu`, then `upsample-conv-relu` until image resolution, then a linear
/// `conv` to the image channels. Channels halve at each upsampling step.
pub struct Decoder<T: Real> {
    pub feature: (usize, usize, usize),
    pub image: ImageShape,
    pub base_channels: usize,
    net: Sequential<T>,
}

impl<T: Real> Decoder<T> {
    /// Fails when the feature map cannot be brought to the image size by 2x steps.
    pub fn new(
        feature: (usize, usize, usize),
        image: ImageShape,
        base_channels: usize,
        seed: u64,
    ) -> Result<Self> {
        let (fc, fh, fw) = feature;
        if fc == 0 || fh == 0 || fw == 0 || base_channels == 0 {
            return Err(SanmError::Shape("decoder dimensions must be positive".into()));
        }
        let mut steps = 0;
        let (mut h, mut w) = (fh, fw);
        while h < image.height && w < image.width {
            h *= 2;
            w *= 2;
            steps += 1;
        }
        if h != image.height || w != image.width {
            return Err(SanmError::Shape(format!(
                "decoder cannot map {fh}x{fw} features to a {}x{} image by 2x upsampling",
                image.height, image.width
            )));
        }
        let mut rng = stream(seed, Domain::Init, 1, 0);
        let mut net = Sequential::default();
        let mut ch = base_channels;
        net.push(Conv2d::new(fc, ch, 3, 1, 1, true, &mut rng));
        net.push(Relu::new());
        for _ in 0..steps {
            let next = (ch / 2).max(8).min(ch);
            net.push(Upsample2x);
            net.push(Conv2d::new(ch, next, 3, 1, 1, true, &mut rng));
            net.push(Relu::new());
            ch = next;
        }
        net.push(Conv2d::new(ch, image.channels, 3, 1, 1, true, &mut rng));
        Ok(Decoder {
            feature,
            image,
            base_channels,
            net,
        })
    }

    pub fn describe(&self) -> String {
        self.net.describe()
    }

    /// Sets every weight and bias to zero.
    pub fn zero_init(&mut self) {
        for p in self.params() {
            p.value.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Engine-layout features `(C, N, Hf, Wf)` to engine-layout images `(C, N, H, W)`.
    pub fn forward(&mut self, features: &Array4<T>, ctx: &Ctx) -> Result<Array4<T>> {
        let (c, _, h, w) = features.dim();
        if (c, h, w) != self.feature {
            return Err(SanmError::Shape(format!(
                "decoder built for {:?} features, got {:?}",
                self.feature,
                (c, h, w)
            )));
        }
        let out = self.net.forward(features, ctx);
        if !out.iter().all(|v| v.is_finite()) {
            return Err(SanmError::NonFinite { stage: "decoder output".into() });
        }
        Ok(out)
    }

    /// Same as [`Decoder::forward`] but returns `(N, C, H, W)`.
    pub fn reconstruct(&mut self, features: &Array4<T>, ctx: &Ctx) -> Result<Array4<T>> {
        Ok(to_batch_major(&self.forward(features, ctx)?))
    }

    /// Gradient w.r.t. the decoder input, accumulating parameter gradients.
    pub fn backward(&mut self, grad: &Array4<T>, ctx: &Ctx) -> Array4<T> {
        self.net
            .backward(grad, ctx, true)
            .expect("input gradient requested")
    }
}

impl<T: Real> Module<T> for Decoder<T> {
    fn params(&mut self) -> Vec<Param<'_, T>> {
        self.net.params()
    }

    fn buffers(&mut self) -> Vec<&mut [T]> {
        Vec::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Exec;
    use crate::nn::{Architecture, Encoder, EncoderSpec};

    #[test]
    fn output_matches_image_shape() {
        let img = ImageShape::new(3, 32, 32);
        let mut dec = Decoder::<f32>::new((16, 8, 8), img, 8, 0).unwrap();
        let f = Array4::from_elem((16, 2, 8, 8), 0.3f32);
        let out = dec.reconstruct(&f, &Ctx::eval(Exec::Sequential)).unwrap();
        assert_eq!(out.dim(), (2, 3, 32, 32));
    }

    #[test]
    fn incompatible_shapes_fail_at_construction() {
        assert!(Decoder::<f32>::new((16, 8, 8), ImageShape::new(3, 30, 30), 8, 0).is_err());
        assert!(Decoder::<f32>::new((16, 8, 4), ImageShape::new(3, 32, 32), 8, 0).is_err());
    }

    #[test]
    fn zero_decoder_maps_zero_latent_to_zero_image() {
        let mut dec = Decoder::<f64>::new((4, 2, 2), ImageShape::new(1, 8, 8), 4, 0).unwrap();
        dec.zero_init();
        let out = dec
            .reconstruct(&Array4::zeros((4, 3, 2, 2)), &Ctx::eval(Exec::Sequential))
            .unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decoder_is_a_fraction_of_the_encoder() {
        let img = ImageShape::new(3, 32, 32);
        let spec = EncoderSpec::new(Architecture::SmallCnn, 10, 3);
        let mut enc = Encoder::<f32>::new(spec, img, 0).unwrap();
        let mut dec = Decoder::<f32>::new(spec.feature_shape(img).unwrap(), img, 32, 0).unwrap();
        let (e, d) = (enc.param_count(), dec.param_count());
        assert!(4 * d < e, "decoder {d} vs encoder {e}");
    }
}
