//! Weight initialization. All draws go through a caller-supplied ChaCha RNG
//! in element order, so initialization is a pure function of the seed.

use ndarray::{ArrayD, NdFloat};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Fills a tensor with draws from N(mean = 0, `std`).
pub fn normal<F: NdFloat>(t: &mut ArrayD<F>, std: f64, rng: &mut ChaCha8Rng) {
    let dist = Normal::new(0.0, std).unwrap();
    for v in t.iter_mut() {
        *v = F::from(dist.sample(rng)).unwrap();
    }
}

/// Fills a tensor with draws from N(`mean`, `std`).
pub fn normal_with_mean<F: NdFloat>(t: &mut ArrayD<F>, mean: f64, std: f64, rng: &mut ChaCha8Rng) {
    let dist = Normal::new(mean, std).unwrap();
    for v in t.iter_mut() {
        *v = F::from(dist.sample(rng)).unwrap();
    }
}

/// He initialization for convolution weights `(cout, cin, kh, kw)`:
/// N(0, sqrt(2 / (cin·kh·kw))). Suits ReLU-family activations.
pub fn he_conv<F: NdFloat>(w: &mut ArrayD<F>, rng: &mut ChaCha8Rng) {
    let sh = w.shape();
    let fan_in = sh[1] * sh[2] * sh[3];
    normal(w, (2.0 / fan_in as f64).sqrt(), rng);
}

/// Xavier initialization for linear weights `(out, in)`:
/// N(0, sqrt(2 / (in + out))).
pub fn xavier_linear<F: NdFloat>(w: &mut ArrayD<F>, rng: &mut ChaCha8Rng) {
    let sh = w.shape();
    let std = (2.0 / (sh[0] + sh[1]) as f64).sqrt();
    normal(w, std, rng);
}

pub fn constant<F: NdFloat>(t: &mut ArrayD<F>, value: f64) {
    t.fill(F::from(value).unwrap());
}
