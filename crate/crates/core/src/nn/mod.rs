//! A small CPU neural-network engine with explicit backward passes.
//!
//! Activations inside the engine are channel-major batches `(C, N, H, W)`, so a
//! convolution over the whole batch is one GEMM against an im2col matrix whose
//! columns run over `(n, y, x)`. Public entry points take and return the usual
//! `(N, C, H, W)` layout.

pub mod checkpoint;
pub mod decoder;
pub mod encoder;
pub mod layers;
pub mod optim;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{Array4, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

use crate::exec::Exec;

pub use decoder::Decoder;
pub use encoder::{Architecture, Encoder, EncoderOutput, EncoderSpec};
pub use optim::{LrSchedule, Sgd};

/// Floating-point element type of the engine (`f32` for training, `f64` for
/// gradient checks).
pub trait Real:
    LinalgScalar
    + Float
    + FromPrimitive
    + ScalarOperand
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }

    fn as_f32(self) -> f32 {
        self.to_f32().unwrap_or(f32::NAN)
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Forward-pass context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ctx {
    /// Batch statistics in normalization layers (training) vs running statistics.
    pub train: bool,
    /// Keep what the backward pass needs.
    pub record: bool,
    pub exec: Exec,
}

impl Ctx {
    pub fn train(exec: Exec) -> Self {
        Ctx {
            train: true,
            record: true,
            exec,
        }
    }

    /// Evaluation mode without caching; no backward pass is possible.
    pub fn eval(exec: Exec) -> Self {
        Ctx {
            train: false,
            record: false,
            exec,
        }
    }
}

/// A trainable tensor and its gradient accumulator, both flat.
pub struct Param<'a, T> {
    pub value: &'a mut [T],
    pub grad: &'a mut [T],
}

pub trait Layer<T: Real>: Send + Sync {
    fn forward(&mut self, x: &Array4<T>, ctx: &Ctx) -> Array4<T>;

    /// Accumulates parameter gradients; returns the input gradient when asked.
    fn backward(&mut self, grad: &Array4<T>, ctx: &Ctx, need_input_grad: bool) -> Option<Array4<T>>;

    fn params(&mut self) -> Vec<Param<'_, T>>;

    /// Non-trainable state that belongs in checkpoints (running statistics).
    fn buffers(&mut self) -> Vec<&mut [T]> {
        Vec::new()
    }

    fn describe(&self) -> String;
}

/// Layers applied in order.
#[derive(Default)]
pub struct Sequential<T: Real> {
    pub layers: Vec<Box<dyn Layer<T>>>,
}

impl<T: Real> Sequential<T> {
    pub fn new(layers: Vec<Box<dyn Layer<T>>>) -> Self {
        Sequential { layers }
    }

    pub fn push(&mut self, layer: impl Layer<T> + 'static) {
        self.layers.push(Box::new(layer));
    }
}

impl<T: Real> Layer<T> for Sequential<T> {
    fn forward(&mut self, x: &Array4<T>, ctx: &Ctx) -> Array4<T> {
        let mut iter = self.layers.iter_mut();
        let Some(first) = iter.next() else {
            return x.clone();
        };
        let mut h = first.forward(x, ctx);
        for layer in iter {
            h = layer.forward(&h, ctx);
        }
        h
    }

    fn backward(&mut self, grad: &Array4<T>, ctx: &Ctx, need_input_grad: bool) -> Option<Array4<T>> {
        let n = self.layers.len();
        let mut g = grad.clone();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            let need = i > 0 || need_input_grad;
            match layer.backward(&g, ctx, need) {
                Some(next) => g = next,
                None => {
                    debug_assert!(!need);
                    return None;
                }
            }
        }
        if n == 0 || need_input_grad {
            Some(g)
        } else {
            None
        }
    }

    fn params(&mut self) -> Vec<Param<'_, T>> {
        self.layers.iter_mut().flat_map(|l| l.params()).collect()
    }

    fn buffers(&mut self) -> Vec<&mut [T]> {
        self.layers.iter_mut().flat_map(|l| l.buffers()).collect()
    }

    fn describe(&self) -> String {
        self.layers.iter().map(|l| l.describe()).collect::<Vec<_>>().join(" -> ")
    }
}

/// Anything with an ordered parameter list.
pub trait Module<T: Real> {
    fn params(&mut self) -> Vec<Param<'_, T>>;
    fn buffers(&mut self) -> Vec<&mut [T]>;

    fn zero_grad(&mut self) {
        for p in self.params() {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    fn param_count(&mut self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    /// Parameters followed by buffers, flattened.
    fn state(&mut self) -> Vec<T> {
        let mut out: Vec<T> = self.params().into_iter().flat_map(|p| p.value.to_vec()).collect();
        for b in self.buffers() {
            out.extend_from_slice(b);
        }
        out
    }

    fn load_state(&mut self, state: &[T]) -> Result<(), crate::error::SanmError> {
        let mut offset = 0;
        let mut take = |dst: &mut [T]| -> Result<(), crate::error::SanmError> {
            let end = offset + dst.len();
            if end > state.len() {
                return Err(crate::error::SanmError::Shape("state vector is too short".into()));
            }
            dst.copy_from_slice(&state[offset..end]);
            offset = end;
            Ok(())
        };
        for p in self.params() {
            take(p.value)?;
        }
        for b in self.buffers() {
            take(b)?;
        }
        if offset != state.len() {
            return Err(crate::error::SanmError::Shape(format!(
                "state vector has {} values, model holds {offset}",
                state.len()
            )));
        }
        Ok(())
    }
}

/// `(N, C, H, W)` to the engine's `(C, N, H, W)`.
pub fn to_channel_major<T: Real>(x: &Array4<T>) -> Array4<T> {
    x.view().permuted_axes([1, 0, 2, 3]).as_standard_layout().into_owned()
}

/// `(C, N, H, W)` back to `(N, C, H, W)`.
pub fn to_batch_major<T: Real>(x: &Array4<T>) -> Array4<T> {
    to_channel_major(x)
}
