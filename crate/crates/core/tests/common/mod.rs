#![allow(dead_code)]

use ndarray::{Array2, Array4};
use sanm::data::ImageShape;
use sanm::exec::Exec;
use sanm::label_reg::soft_cross_entropy;
use sanm::nn::layers::{BatchNorm2d, Conv2d, LinearHead, Relu};
use sanm::nn::{to_channel_major, Architecture, Ctx, Decoder, Encoder, EncoderSpec, Module, Sequential};
use sanm::reconstruction::{reconstruction_loss_grad, ReconTarget};
use sanm::rng::{stream, Domain};

/// Toy encoder/decoder pair in f64: 1x4x4 images, 3 classes.
pub struct Toy {
    pub encoder: Encoder<f64>,
    pub decoder: Decoder<f64>,
    pub masked: Array4<f64>,
    pub original: Array4<f64>,
    pub targets: Array2<f64>,
    pub beta: f64,
}

impl Toy {
    pub fn new(seed: u64, beta: f64) -> Self {
        let image = ImageShape::new(1, 4, 4);
        let mut rng = stream(seed, Domain::Init, 9, 0);
        let mut body = Sequential::default();
        body.push(Conv2d::new(1, 3, 3, 1, 1, false, &mut rng));
        body.push(BatchNorm2d::new(3));
        body.push(Relu::new());
        body.push(Conv2d::new(3, 4, 3, 2, 1, false, &mut rng));
        body.push(Relu::new());
        let head = LinearHead::new(4, 3, &mut rng);
        let spec = EncoderSpec {
            architecture: Architecture::SmallCnn,
            class_count: 3,
            in_channels: 1,
            width: 1,
        };
        let mut encoder = Encoder::from_parts(spec, image, body, head);
        let mut decoder = Decoder::new((4, 2, 2), image, 3, seed).unwrap();
        let mut r = stream(seed, Domain::Synthetic, 9, 1);
        use rand::Rng;
        // Zero-initialized biases put ReLU inputs exactly on the kink wherever the
        // incoming activations are all zero; jitter every parameter off it.
        for p in encoder.params().into_iter().chain(decoder.params()) {
            p.value.iter_mut().for_each(|v| *v += r.random_range(-0.05..0.05));
        }
        let original = Array4::from_shape_simple_fn((3, 1, 4, 4), || r.random::<f64>());
        let mut masked = original.clone();
        for v in masked.slice_mut(ndarray::s![.., .., 1..3, 0..2]).iter_mut() {
            *v = r.random::<f64>();
        }
        let targets = Array2::from_shape_vec(
            (3, 3),
            vec![0.82, 0.09, 0.09, 0.1, 0.8, 0.1, 0.3, 0.3, 0.4],
        )
        .unwrap();
        Toy {
            encoder,
            decoder,
            masked,
            original,
            targets,
            beta,
        }
    }

    pub fn param_count(&mut self) -> usize {
        self.encoder.param_count() + self.decoder.param_count()
    }

    /// `L_train` and, when `backward`, the accumulated parameter gradients.
    pub fn loss(&mut self, backward: bool) -> f64 {
        let ctx = Ctx::train(Exec::Sequential);
        let out = self.encoder.forward(&self.masked, &ctx).unwrap();
        let (losses, dlogits) = soft_cross_entropy(out.logits.view(), self.targets.view());
        let l_c = losses.iter().sum::<f64>() / losses.len() as f64;
        let recon = self.decoder.forward(&out.features, &ctx).unwrap();
        let target = to_channel_major(&self.original);
        let (l_r, mut g) = reconstruction_loss_grad(&recon, &target, ReconTarget::AllPixels, None).unwrap();
        if backward {
            g.mapv_inplace(|v| v * self.beta);
            let dfeat = self.decoder.backward(&g, &ctx);
            self.encoder.backward(&dlogits, Some(&dfeat), &ctx);
        }
        l_c + self.beta * l_r
    }

    /// Flat parameter vector (encoder then decoder) and its analytic gradient.
    pub fn analytic(&mut self) -> (Vec<f64>, Vec<f64>) {
        self.encoder.zero_grad();
        self.decoder.zero_grad();
        self.loss(true);
        let mut values = Vec::new();
        let mut grads = Vec::new();
        for p in self.encoder.params().into_iter().chain(self.decoder.params()) {
            values.extend_from_slice(p.value);
            grads.extend_from_slice(p.grad);
        }
        (values, grads)
    }

    fn set(&mut self, index: usize, value: f64) {
        let mut i = index;
        for p in self.encoder.params().into_iter().chain(self.decoder.params()) {
            if i < p.value.len() {
                p.value[i] = value;
                return;
            }
            i -= p.value.len();
        }
        panic!("parameter index out of range");
    }

    /// Central difference for parameter `index`.
    pub fn numeric(&mut self, index: usize, base: f64, eps: f64) -> f64 {
        self.set(index, base + eps);
        let up = self.loss(false);
        self.set(index, base - eps);
        let dn = self.loss(false);
        self.set(index, base);
        (up - dn) / (2.0 * eps)
    }
}

pub struct GradReport {
    pub params: usize,
    pub max_rel: f64,
    pub worst: usize,
}

/// Compares analytic and central-difference gradients on every parameter.
pub fn gradient_check(seed: u64) -> GradReport {
    let mut toy = Toy::new(seed, 1.0);
    let (values, grads) = toy.analytic();
    let mut max_rel = 0.0f64;
    let mut worst = 0;
    for (i, (&v, &a)) in values.iter().zip(&grads).enumerate() {
        let n = toy.numeric(i, v, 1e-6);
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    GradReport {
        params: values.len(),
        max_rel,
        worst,
    }
}

/// Probability that a random positive scores above a random negative (ties count half).
pub fn auc(positives: &[f64], negatives: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&p| (p, true))
        .chain(negatives.iter().map(|&n| (n, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Mann-Whitney U via average ranks.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j + 1) as f64 / 2.0;
        rank_sum += all[i..j].iter().filter(|x| x.1).count() as f64 * avg;
        i = j;
    }
    let (np, nn) = (positives.len() as f64, negatives.len() as f64);
    (rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}
