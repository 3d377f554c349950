//! Helpers shared by unit tests.

use candle_core::Tensor;

pub fn max_grad_error(x0: &Tensor, probes: usize, f: impl Fn(&Tensor) -> Tensor) -> f64 {
    crate::gradcheck::max_relative_error(x0, probes, |x| Ok(f(x))).unwrap()
}

pub fn seeded(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    crate::gradcheck::seeded_uniform(shape, seed, lo, hi).unwrap()
}
