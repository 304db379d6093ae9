//! Classification encoders with a feature tap on the last convolutional block.

use ndarray::{s, Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm2d, Conv2d, LinearHead, PreActBlock, Relu};
use super::{to_channel_major, Ctx, Layer, Module, Param, Real, Sequential};
use crate::activation::{CamWeights, FeatureTap};
use crate::data::ImageShape;
use crate::error::{Result, SanmError};
use crate::rng::{stream, Domain};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Six 3x3 convolutions in three stages (two stride-2), then GAP + linear.
    SmallCnn,
    PreactResnet18,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::SmallCnn => "small_cnn",
            Architecture::PreactResnet18 => "preact_resnet18",
        }
    }

    pub fn default_width(self) -> usize {
        match self {
            Architecture::SmallCnn => 32,
            Architecture::PreactResnet18 => 64,
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = SanmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small_cnn" => Ok(Architecture::SmallCnn),
            "preact_resnet18" => Ok(Architecture::PreactResnet18),
            other => Err(SanmError::config(format!(
                "unknown architecture `{other}` (expected small_cnn or preact_resnet18)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub architecture: Architecture,
    pub class_count: usize,
    pub in_channels: usize,
    /// Channels of the first stage; later stages double it.
    pub width: usize,
}

impl EncoderSpec {
    pub fn new(architecture: Architecture, class_count: usize, in_channels: usize) -> Self {
        EncoderSpec {
            architecture,
            class_count,
            in_channels,
            width: architecture.default_width(),
        }
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.width = width;
        self
    }

    /// Name of the tapped layer.
    pub fn feature_tap_layer(&self) -> &'static str {
        match self.architecture {
            Architecture::SmallCnn => "stage3.conv2",
            Architecture::PreactResnet18 => "layer4.out",
        }
    }

    /// Channels of the tapped feature map.
    pub fn feature_channels(&self) -> usize {
        match self.architecture {
            Architecture::SmallCnn => 4 * self.width,
            Architecture::PreactResnet18 => 8 * self.width,
        }
    }

    /// Spatial downsampling factor between the image and the feature map.
    pub fn downsample(&self) -> usize {
        match self.architecture {
            Architecture::SmallCnn => 4,
            Architecture::PreactResnet18 => 8,
        }
    }

    /// `(channels, height, width)` of the tap for an image of `image` shape.
    pub fn feature_shape(&self, image: ImageShape) -> Result<(usize, usize, usize)> {
        let d = self.downsample();
        if image.height < d || image.width < d {
            return Err(SanmError::Shape(format!(
                "{} needs images of at least {d}x{d}, got {}x{}",
                self.architecture.name(),
                image.height,
                image.width
            )));
        }
        // Each stride-2, pad-1, 3x3 conv maps n to (n - 1) / 2 + 1.
        let shrink = |mut n: usize| {
            let mut k = d;
            while k > 1 {
                n = (n - 1) / 2 + 1;
                k /= 2;
            }
            n
        };
        Ok((self.feature_channels(), shrink(image.height), shrink(image.width)))
    }

    pub fn validate(&self, image: ImageShape) -> Result<()> {
        if self.class_count < 2 {
            return Err(SanmError::config("encoder needs at least 2 classes"));
        }
        if self.width == 0 {
            return Err(SanmError::config("encoder width must be positive"));
        }
        if self.in_channels != image.channels {
            return Err(SanmError::Shape(format!(
                "encoder expects {} input channels, images have {}",
                self.in_channels, image.channels
            )));
        }
        self.feature_shape(image).map(|_| ())
    }
}

/// Logits `(N, K)` and the tapped features in engine layout `(C, N, Hf, Wf)`.
#[derive(Debug, Clone)]
pub struct EncoderOutput<T: Real> {
    pub logits: Array2<T>,
    pub features: Array4<T>,
}

impl<T: Real> EncoderOutput<T> {
    pub fn batch(&self) -> usize {
        self.logits.nrows()
    }

    /// Per-sample taps in `f32`.
    pub fn taps(&self) -> Vec<FeatureTap> {
        (0..self.batch())
            .map(|i| {
                let fmap: Array3<f32> = self.features.index_axis(Axis(1), i).mapv(|v| v.as_f32());
                let logits = self.logits.row(i).iter().map(|v| v.as_f32()).collect();
                FeatureTap::new(fmap, logits)
            })
            .collect()
    }
}

pub struct Encoder<T: Real> {
    pub spec: EncoderSpec,
    pub image: ImageShape,
    body: Sequential<T>,
    head: LinearHead<T>,
}

impl<T: Real> Encoder<T> {
    /// Builds and initializes an encoder; weights depend only on `seed`.
    pub fn new(spec: EncoderSpec, image: ImageShape, seed: u64) -> Result<Self> {
        spec.validate(image)?;
        let mut rng = stream(seed, Domain::Init, 0, 0);
        let w = spec.width;
        let mut body = Sequential::default();
        match spec.architecture {
            Architecture::SmallCnn => {
                let plan = [
                    (spec.in_channels, w, 1),
                    (w, w, 1),
                    (w, 2 * w, 2),
                    (2 * w, 2 * w, 1),
                    (2 * w, 4 * w, 2),
                    (4 * w, 4 * w, 1),
                ];
                for (cin, cout, stride) in plan {
                    body.push(Conv2d::new(cin, cout, 3, stride, 1, false, &mut rng));
                    body.push(BatchNorm2d::new(cout));
                    body.push(Relu::new());
                }
            }
            Architecture::PreactResnet18 => {
                body.push(Conv2d::new(spec.in_channels, w, 3, 1, 1, false, &mut rng));
                let mut cin = w;
                for (stage, mult) in [1usize, 2, 4, 8].into_iter().enumerate() {
                    let cout = w * mult;
                    let stride = if stage == 0 { 1 } else { 2 };
                    body.push(PreActBlock::new(cin, cout, stride, &mut rng));
                    body.push(PreActBlock::new(cout, cout, 1, &mut rng));
                    cin = cout;
                }
                body.push(BatchNorm2d::new(cin));
                body.push(Relu::new());
            }
        }
        let head = LinearHead::new(spec.feature_channels(), spec.class_count, &mut rng);
        Ok(Encoder { spec, image, body, head })
    }

    /// Assembles an encoder from an arbitrary body; used for small test models.
    pub fn from_parts(spec: EncoderSpec, image: ImageShape, body: Sequential<T>, head: LinearHead<T>) -> Self {
        Encoder { spec, image, body, head }
    }

    pub fn describe(&self) -> String {
        format!("{} -> gap -> linear({})", self.body.describe(), self.spec.class_count)
    }

    /// Forward pass over an `(N, C, H, W)` batch.
    pub fn forward(&mut self, images: &Array4<T>, ctx: &Ctx) -> Result<EncoderOutput<T>> {
        let (_, c, h, w) = images.dim();
        if c != self.image.channels || h != self.image.height || w != self.image.width {
            return Err(SanmError::Shape(format!(
                "batch images are {c}x{h}x{w}, encoder was built for {}x{}x{}",
                self.image.channels, self.image.height, self.image.width
            )));
        }
        let x = to_channel_major(images);
        let features = self.body.forward(&x, ctx);
        let logits = self.head.forward(&features, ctx.record);
        if !features.iter().all(|v| v.is_finite()) {
            return Err(SanmError::NonFinite {
                stage: format!("encoder features ({})", self.spec.feature_tap_layer()),
            });
        }
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(SanmError::NonFinite { stage: "encoder logits".into() });
        }
        Ok(EncoderOutput { logits, features })
    }

    /// Backpropagates the gradient of a loss w.r.t. the logits and, optionally,
    /// w.r.t. the tapped features (from a decoder).
    pub fn backward(&mut self, dlogits: &Array2<T>, dfeatures: Option<&Array4<T>>, ctx: &Ctx) {
        let mut g = self.head.backward(dlogits);
        if let Some(df) = dfeatures {
            g += df;
        }
        self.body.backward(&g, ctx, false);
    }

    /// Evaluation-mode taps without gradient bookkeeping.
    pub fn forward_with_tap(&mut self, images: &Array4<T>, exec: crate::exec::Exec) -> Result<Vec<FeatureTap>> {
        Ok(self.forward(images, &Ctx::eval(exec))?.taps())
    }

    /// Classifier weights `(K, C)`.
    pub fn classifier(&self) -> &Array2<T> {
        &self.head.weight
    }
}

impl<T: Real> Module<T> for Encoder<T> {
    fn params(&mut self) -> Vec<Param<'_, T>> {
        let mut out = self.body.params();
        out.extend(self.head.params());
        out
    }

    fn buffers(&mut self) -> Vec<&mut [T]> {
        self.body.buffers()
    }
}

impl<T: Real> CamWeights for Encoder<T> {
    fn feature_gradient(&self, tap: &FeatureTap, class: usize) -> Array3<f32> {
        // d logit_k / d F[c, y, x] = W[k, c] / (Hf * Wf) for a GAP + linear head.
        let (c, h, w) = tap.feature_map.dim();
        let scale = 1.0 / (h * w) as f32;
        let row = self.head.weight.slice(s![class, ..]);
        Array3::from_shape_fn((c, h, w), |(k, _, _)| row[k].as_f32() * scale)
    }

    fn classifier_row(&self, class: usize) -> Option<Vec<f32>> {
        Some(self.head.weight.row(class).iter().map(|v| v.as_f32()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Exec;

    fn img() -> ImageShape {
        ImageShape::new(3, 32, 32)
    }

    #[test]
    fn small_cnn_taps_eight_by_eight() {
        let spec = EncoderSpec::new(Architecture::SmallCnn, 10, 3);
        assert_eq!(spec.feature_shape(img()).unwrap(), (128, 8, 8));
        let mut enc = Encoder::<f32>::new(spec.with_width(4), img(), 1).unwrap();
        let x = Array4::from_shape_fn((3, 3, 32, 32), |(n, c, y, x)| ((n + c + y * x) % 7) as f32 / 7.0);
        let taps = enc.forward_with_tap(&x, Exec::Sequential).unwrap();
        assert_eq!(taps.len(), 3);
        assert_eq!(taps[0].feature_map.dim(), (16, 8, 8));
        assert_eq!(taps[0].logits.len(), 10);
    }

    #[test]
    fn small_cnn_is_under_two_million_params() {
        let spec = EncoderSpec::new(Architecture::SmallCnn, 10, 3);
        let mut enc = Encoder::<f32>::new(spec, img(), 0).unwrap();
        let n = enc.param_count();
        assert!(n < 2_000_000, "{n}");
    }

    #[test]
    fn duplicate_images_give_identical_taps_in_eval() {
        let spec = EncoderSpec::new(Architecture::SmallCnn, 4, 3).with_width(4);
        let mut enc = Encoder::<f32>::new(spec, ImageShape::new(3, 16, 16), 3).unwrap();
        let one = Array4::from_shape_fn((1, 3, 16, 16), |(_, c, y, x)| ((c * 31 + y * 7 + x) % 11) as f32 / 11.0);
        let mut two = Array4::zeros((2, 3, 16, 16));
        two.slice_mut(s![0..1, .., .., ..]).assign(&one);
        two.slice_mut(s![1..2, .., .., ..]).assign(&one);
        let taps = enc.forward_with_tap(&two, Exec::Sequential).unwrap();
        assert_eq!(taps[0], taps[1]);
    }

    #[test]
    fn preact_resnet18_shapes() {
        let spec = EncoderSpec::new(Architecture::PreactResnet18, 10, 3).with_width(2);
        assert_eq!(spec.feature_shape(img()).unwrap(), (16, 4, 4));
        let mut enc = Encoder::<f32>::new(spec, img(), 0).unwrap();
        let x = Array4::from_elem((2, 3, 32, 32), 0.5f32);
        let out = enc.forward(&x, &Ctx::train(Exec::Sequential)).unwrap();
        assert_eq!(out.logits.dim(), (2, 10));
        assert_eq!(out.features.dim(), (16, 2, 4, 4));
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let spec = EncoderSpec::new(Architecture::SmallCnn, 10, 1);
        assert!(Encoder::<f32>::new(spec, img(), 0).is_err());
    }
}
