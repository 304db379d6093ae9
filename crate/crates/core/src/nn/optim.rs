//! SGD with momentum and a step learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::{Module, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    /// Fraction of training after which the rate is multiplied by `gamma`.
    pub drop_at: f64,
    pub gamma: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base: 0.02,
            drop_at: 2.0 / 3.0,
            gamma: 0.1,
        }
    }
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        LrSchedule {
            base,
            drop_at: 1.0,
            gamma: 1.0,
        }
    }

    /// First epoch run at the reduced rate.
    pub fn drop_epoch(&self, epochs: usize) -> usize {
        (self.drop_at * epochs as f64).round() as usize
    }

    pub fn rate(&self, epoch: usize, epochs: usize) -> f64 {
        if self.drop_at < 1.0 && epoch >= self.drop_epoch(epochs) {
            self.base * self.gamma
        } else {
            self.base
        }
    }
}

/// `v = momentum * v + (g + wd * w); w -= lr * v`
#[derive(Debug, Clone)]
pub struct Sgd<T: Real> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, module: &mut dyn Module<T>, lr: f64) {
        let (lr, mom, wd) = (T::lit(lr), T::lit(self.momentum), T::lit(self.weight_decay));
        let params = module.params();
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        }
        for (p, v) in params.into_iter().zip(self.velocity.iter_mut()) {
            for ((w, g), vi) in p.value.iter_mut().zip(p.grad.iter()).zip(v.iter_mut()) {
                *vi = mom * *vi + *g + wd * *w;
                *w -= lr * *vi;
            }
        }
    }

    /// Momentum buffers, flattened, for checkpointing.
    pub fn state(&self) -> Vec<T> {
        self.velocity.iter().flatten().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Param;

    struct Quad {
        w: Vec<f64>,
        g: Vec<f64>,
    }

    impl Module<f64> for Quad {
        fn params(&mut self) -> Vec<Param<'_, f64>> {
            vec![Param {
                value: &mut self.w,
                grad: &mut self.g,
            }]
        }

        fn buffers(&mut self) -> Vec<&mut [f64]> {
            Vec::new()
        }
    }

    #[test]
    fn schedule_drops_once_at_two_thirds() {
        let s = LrSchedule::default();
        assert_eq!(s.drop_epoch(30), 20);
        assert_eq!(s.rate(19, 30), 0.02);
        assert!((s.rate(20, 30) - 0.002).abs() < 1e-15);
        assert_eq!(LrSchedule::constant(0.1).rate(29, 30), 0.1);
    }

    #[test]
    fn sgd_minimizes_a_quadratic() {
        let mut m = Quad { w: vec![3.0, -2.0], g: vec![0.0; 2] };
        let mut opt = Sgd::new(0.9, 0.0);
        for _ in 0..300 {
            m.g = m.w.clone(); // gradient of |w|^2 / 2
            opt.step(&mut m, 0.05);
        }
        assert!(m.w.iter().all(|w| w.abs() < 1e-4), "{:?}", m.w);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut m = Quad { w: vec![1.0, 2.0], g: vec![0.0; 2] };
        let mut opt = Sgd::new(0.9, 0.0);
        opt.step(&mut m, 0.1);
        assert_eq!(m.w, vec![1.0, 2.0]);
    }
}
