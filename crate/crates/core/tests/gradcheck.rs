mod common;

use common::{gradient_check, Toy};

#[test]
fn toy_model_is_small() {
    let mut toy = Toy::new(1, 1.0);
    let n = toy.param_count();
    assert!(n <= 1000, "{n} parameters");
}

#[test]
fn analytic_gradients_match_finite_differences() {
    for seed in [1, 2] {
        let r = gradient_check(seed);
        assert!(r.max_rel < 1e-3, "seed {seed}: relative error {} at parameter {}", r.max_rel, r.worst);
    }
}

#[test]
fn auc_oracle_sanity() {
    assert_eq!(common::auc(&[2.0, 3.0], &[0.0, 1.0]), 1.0);
    assert_eq!(common::auc(&[0.0], &[1.0]), 0.0);
    assert_eq!(common::auc(&[1.0], &[1.0]), 0.5);
}

mod layers {
    use ndarray::Array4;
    use rand::Rng;
    use sanm::exec::Exec;
    use sanm::nn::layers::{BatchNorm2d, Conv2d, PreActBlock, Relu, Sigmoid, Upsample2x};
    use sanm::nn::{Ctx, Layer, Sequential};
    use sanm::rng::{stream, Domain};

    fn objective(net: &mut Sequential<f64>, x: &Array4<f64>, r: &Array4<f64>) -> f64 {
        let y = net.forward(x, &Ctx::train(Exec::Sequential));
        (&y * r).sum()
    }

    /// Checks parameter and input gradients of `net` against central differences.
    fn check(mut net: Sequential<f64>, in_shape: (usize, usize, usize, usize), seed: u64) {
        let mut rng = stream(seed, Domain::Synthetic, 77, 0);
        for p in net.params() {
            p.value.iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
        }
        let x = Array4::from_shape_simple_fn(in_shape, || rng.random::<f64>() - 0.5);
        let ctx = Ctx::train(Exec::Sequential);
        let y = net.forward(&x, &ctx);
        let r = Array4::from_shape_simple_fn(y.dim(), || rng.random::<f64>() - 0.5);
        let dx = net.backward(&r, &ctx, true).unwrap();
        let eps = 1e-6;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);

        let mut xp = x.clone();
        for i in 0..x.len() {
            let base = x.as_slice().unwrap()[i];
            xp.as_slice_mut().unwrap()[i] = base + eps;
            let up = objective(&mut net, &xp, &r);
            xp.as_slice_mut().unwrap()[i] = base - eps;
            let dn = objective(&mut net, &xp, &r);
            xp.as_slice_mut().unwrap()[i] = base;
            let n = (up - dn) / (2.0 * eps);
            let a = dx.as_slice().unwrap()[i];
            assert!(rel(a, n) < 1e-4, "{}: input {i}: {a} vs {n}", net.describe());
        }

        let grads: Vec<Vec<f64>> = net.params().iter().map(|p| p.grad.to_vec()).collect();
        for (pi, g) in grads.iter().enumerate() {
            for (j, &a) in g.iter().enumerate() {
                let base = net.params()[pi].value[j];
                net.params()[pi].value[j] = base + eps;
                let up = objective(&mut net, &x, &r);
                net.params()[pi].value[j] = base - eps;
                let dn = objective(&mut net, &x, &r);
                net.params()[pi].value[j] = base;
                let n = (up - dn) / (2.0 * eps);
                assert!(rel(a, n) < 1e-4, "{}: param {pi}[{j}]: {a} vs {n}", net.describe());
            }
        }
    }

    #[test]
    fn strided_conv_with_bias() {
        let mut rng = stream(1, Domain::Init, 0, 0);
        let net = Sequential::new(vec![Box::new(Conv2d::new(2, 3, 3, 2, 1, true, &mut rng))]);
        check(net, (2, 2, 5, 5), 1);
    }

    #[test]
    fn batchnorm_relu_stack() {
        let mut rng = stream(2, Domain::Init, 0, 0);
        let mut net = Sequential::default();
        net.push(Conv2d::new(2, 3, 3, 1, 1, false, &mut rng));
        net.push(BatchNorm2d::new(3));
        net.push(Relu::new());
        check(net, (2, 3, 4, 4), 2);
    }

    #[test]
    fn preact_blocks_with_and_without_shortcut_conv() {
        let mut rng = stream(3, Domain::Init, 0, 0);
        let mut net = Sequential::default();
        net.push(PreActBlock::new(2, 3, 2, &mut rng));
        net.push(PreActBlock::new(3, 3, 1, &mut rng));
        check(net, (2, 3, 4, 4), 3);
    }

    #[test]
    fn upsample_and_sigmoid() {
        let mut rng = stream(4, Domain::Init, 0, 0);
        let mut net = Sequential::default();
        net.push(Upsample2x);
        net.push(Conv2d::new(2, 2, 3, 1, 1, true, &mut rng));
        net.push(Sigmoid::new());
        check(net, (2, 2, 3, 3), 4);
    }

    #[test]
    fn eval_mode_batchnorm() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        let x = Array4::from_shape_fn((2, 3, 2, 2), |(c, n, y, x)| (c + 2 * n + y + 3 * x) as f64);
        for _ in 0..50 {
            bn.forward(&x, &Ctx::train(Exec::Sequential));
        }
        // Running statistics converge to the batch statistics, so eval mode
        // approximately reproduces the train-mode normalization.
        let a = bn.forward(&x, &Ctx::train(Exec::Sequential));
        let b = bn.forward(&x, &Ctx::eval(Exec::Sequential));
        let diff = (&a - &b).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(diff < 0.1, "{diff}");
    }
}

#[test]
fn gradient_check_holds_across_seeds() {
    for seed in 3..12 {
        let r = gradient_check(seed);
        assert!(r.max_rel < 1e-3, "seed {seed}: relative error {} at parameter {}", r.max_rel, r.worst);
    }
}
