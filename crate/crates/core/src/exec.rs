//! Execution policy for the data-parallel inner loops.
//!
//! Every batch-level loop in the crate (im2col, per-channel normalization,
//! per-sample CAM and mask construction, noise injection, evaluation) goes
//! through [`Exec`]. With the `parallel` feature the `Parallel` policy runs on
//! the rayon pool; without it, or with `Sequential`, the same closures run in
//! order on the calling thread. Results are always collected in index order,
//! so both policies produce identical output.

use ndarray::{ArrayViewMut, Axis, Dimension, RemoveAxis};
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    pub fn from_flag(parallel: bool) -> Self {
        if parallel {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }

    /// Whether this policy will actually fan out to worker threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Maps `f` over `0..n`, returning results in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Calls `f(i, lane)` for every subview along `axis`.
    pub fn for_each_axis_mut<A, D, F>(self, mut array: ArrayViewMut<'_, A, D>, axis: Axis, f: F)
    where
        A: Send + Sync,
        D: Dimension + RemoveAxis,
        F: Fn(usize, ArrayViewMut<'_, A, D::Smaller>) + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            array
                .axis_iter_mut(axis)
                .into_par_iter()
                .enumerate()
                .for_each(|(i, lane)| f(i, lane));
            return;
        }
        for (i, lane) in array.axis_iter_mut(axis).enumerate() {
            f(i, lane);
        }
    }

    /// Calls `f(i, item)` for every element of a mutable slice.
    pub fn for_each_mut<T, F>(self, items: &mut [T], f: F)
    where
        T: Send,
        F: Fn(usize, &mut T) + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Exec::Parallel {
            items.par_iter_mut().enumerate().for_each(|(i, x)| f(i, x));
            return;
        }
        for (i, x) in items.iter_mut().enumerate() {
            f(i, x);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn map_preserves_order_under_both_policies() {
        let seq = Exec::Sequential.map(1000, |i| i * i);
        let par = Exec::Parallel.map(1000, |i| i * i);
        assert_eq!(seq, par);
        assert_eq!(seq[31], 961);
    }

    #[test]
    fn axis_visit_touches_every_row_once() {
        let mut a = Array2::<u32>::zeros((17, 5));
        Exec::Parallel.for_each_axis_mut(a.view_mut(), Axis(0), |i, mut row| {
            row.fill(i as u32 + 1);
        });
        for (i, row) in a.rows().into_iter().enumerate() {
            assert!(row.iter().all(|&v| v == i as u32 + 1));
        }
    }
}
