use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Real, Tensor};

/// `rows × cols` tensor with i.i.d. `N(0, std²)` entries, drawn in row-major order.
pub(crate) fn normal<T: Real>(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite nonnegative std");
    let data = (0..rows * cols).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::matrix(rows, cols, data).expect("length matches")
}

/// Gaussian with `std = 1/√fan_in`, where `fan_in = rows`.
pub(crate) fn fan_in<T: Real>(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor<T> {
    normal(rng, rows, cols, 1.0 / (rows as f64).sqrt())
}
