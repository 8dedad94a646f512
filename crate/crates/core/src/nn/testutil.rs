//! Shared helpers for gradient checks in unit tests.

use ndarray::{ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let dist = Normal::new(0.0, std).unwrap();
    ArrayD::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

/// Central finite differences of a scalar function, element by element.
pub fn numeric_grad<G>(mut f: G, x: &ArrayD<f64>, h: f64) -> ArrayD<f64>
where
    G: FnMut(&ArrayD<f64>) -> f64,
{
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let flat = x.as_slice().unwrap()[idx];
        xp.as_slice_mut().unwrap()[idx] = flat + h;
        let fp = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = flat - h;
        let fm = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = flat;
        grad.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// `‖a − b‖∞ / max(‖a‖∞, ‖b‖∞, floor)`. The floor keeps the ratio meaningful
/// when both gradients vanish.
pub fn max_rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let diff = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    let na = a.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
    let nb = b.iter().map(|v| v.abs()).fold(0.0f64, f64::max);
    diff / na.max(nb).max(floor)
}
