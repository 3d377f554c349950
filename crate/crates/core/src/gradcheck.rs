//! Finite-difference checks of autograd.

use candle_core::{Device, Tensor, Var};
use rand::{Rng, SeedableRng};

use crate::error::Result;

/// Compare autograd against central differences for a scalar function of
/// one f64 tensor. Probes `probes` evenly spaced entries and returns the
/// worst relative error, with magnitudes below 1e-3 treated as 1e-3.
pub fn max_relative_error(x0: &Tensor, probes: usize, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<f64> {
    let var = Var::from_tensor(x0)?;
    let grads = f(var.as_tensor())?.backward()?;
    let analytic = match grads.get(var.as_tensor()) {
        Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
        None => vec![0.0; x0.elem_count()],
    };
    let base = x0.flatten_all()?.to_vec1::<f64>()?;
    let n = base.len();
    let step = (n / probes.max(1)).max(1);
    let eps = 1e-6;
    let eval = |vals: Vec<f64>| -> Result<f64> { Ok(f(&Tensor::from_vec(vals, x0.shape(), x0.device())?)?.to_scalar::<f64>()?) };
    let mut worst = 0.0f64;
    for i in (0..n).step_by(step) {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-3);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Reproducible uniform f64 tensor on the CPU.
pub fn seeded_uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Result<Tensor> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}
