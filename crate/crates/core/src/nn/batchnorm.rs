//! Batch normalization over `(N, C, H, W)` activations.
//!
//! Training mode normalizes with batch statistics (biased variance) and
//! maintains running estimates (unbiased variance) for evaluation mode, which
//! is also what weight-averaging recalibration rewrites.

use ndarray::{Array4, Axis, NdFloat};

use super::{Buffer, HasParams, ParamTensor};
use crate::{Error, Result};

struct BnCache<F> {
    xhat: Array4<F>,
    inv_std: Vec<F>,
}

pub struct BatchNorm2d<F> {
    pub gamma: ParamTensor<F>,
    pub beta: ParamTensor<F>,
    pub running_mean: Buffer<F>,
    pub running_var: Buffer<F>,
    pub c: usize,
    pub eps: f64,
    pub momentum: f64,
    cache: Option<BnCache<F>>,
}

impl<F: NdFloat> BatchNorm2d<F> {
    pub fn new(name: &str, c: usize) -> Self {
        let mut gamma = ParamTensor::zeros(format!("{name}.gamma"), &[c]);
        gamma.value.fill(F::one());
        let mut running_var = Buffer::zeros(format!("{name}.running_var"), &[c]);
        running_var.value.fill(F::one());
        BatchNorm2d {
            gamma,
            beta: ParamTensor::zeros(format!("{name}.beta"), &[c]),
            running_mean: Buffer::zeros(format!("{name}.running_mean"), &[c]),
            running_var,
            c,
            eps: 1e-5,
            momentum: 0.1,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.c, "channel mismatch");
        let eps = F::from(self.eps).unwrap();
        let mut y = x.clone();
        if train {
            let m = n * h * w;
            assert!(m > 1, "batch statistics need more than one value per channel");
            let mf = F::from(m).unwrap();
            let mut xhat = x.clone();
            let mut inv_std = Vec::with_capacity(c);
            let gs = self.gamma.value.as_slice().unwrap().to_vec();
            let bs = self.beta.value.as_slice().unwrap().to_vec();
            for ci in 0..c {
                let plane = x.index_axis(Axis(1), ci);
                let mean = plane.sum() / mf;
                let var =
                    plane.iter().fold(F::zero(), |a, &v| a + (v - mean) * (v - mean)) / mf;
                let is = F::one() / (var + eps).sqrt();
                inv_std.push(is);

                let mom = F::from(self.momentum).unwrap();
                let unbiased = var * mf / F::from(m - 1).unwrap();
                let rm = &mut self.running_mean.value.as_slice_mut().unwrap()[ci];
                *rm = (F::one() - mom) * *rm + mom * mean;
                let rv = &mut self.running_var.value.as_slice_mut().unwrap()[ci];
                *rv = (F::one() - mom) * *rv + mom * unbiased;

                let mut xh = xhat.index_axis_mut(Axis(1), ci);
                xh.mapv_inplace(|v| (v - mean) * is);
                let mut yp = y.index_axis_mut(Axis(1), ci);
                yp.assign(&xh);
                yp.mapv_inplace(|v| v * gs[ci] + bs[ci]);
            }
            self.cache = Some(BnCache { xhat, inv_std });
        } else {
            let gs = self.gamma.value.as_slice().unwrap();
            let bs = self.beta.value.as_slice().unwrap();
            let rm = self.running_mean.value.as_slice().unwrap();
            let rv = self.running_var.value.as_slice().unwrap();
            for ci in 0..c {
                let is = F::one() / (rv[ci] + eps).sqrt();
                let mut yp = y.index_axis_mut(Axis(1), ci);
                yp.mapv_inplace(|v| (v - rm[ci]) * is * gs[ci] + bs[ci]);
            }
        }
        y
    }

    pub fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let cache = self.cache.take().expect("backward requires a prior forward(train=true)");
        let (n, c, h, w) = gy.dim();
        let m = F::from(n * h * w).unwrap();
        let mut gx = gy.clone();
        let gs = self.gamma.value.as_slice().unwrap().to_vec();
        for ci in 0..c {
            let gyp = gy.index_axis(Axis(1), ci);
            let xh = cache.xhat.index_axis(Axis(1), ci);
            let sum_gy = gyp.sum();
            let sum_gy_xhat = (&gyp * &xh).sum();
            self.beta.grad.as_slice_mut().unwrap()[ci] += sum_gy;
            self.gamma.grad.as_slice_mut().unwrap()[ci] += sum_gy_xhat;

            let scale = gs[ci] * cache.inv_std[ci] / m;
            let mut gxp = gx.index_axis_mut(Axis(1), ci);
            ndarray::Zip::from(&mut gxp).and(&xh).for_each(|g, &xhv| {
                *g = scale * (m * *g - sum_gy - xhv * sum_gy_xhat);
            });
        }
        gx
    }

    /// Overwrites the running statistics, e.g. with exact dataset moments
    /// after weight averaging.
    pub fn set_running_stats(&mut self, mean: &[f64], var: &[f64]) -> Result<()> {
        if mean.len() != self.c || var.len() != self.c {
            return Err(Error::Shape(format!(
                "running stats length {}/{} does not match {} channels",
                mean.len(),
                var.len(),
                self.c
            )));
        }
        for (dst, &v) in self.running_mean.value.iter_mut().zip(mean) {
            *dst = F::from(v).unwrap();
        }
        for (dst, &v) in self.running_var.value.iter_mut().zip(var) {
            *dst = F::from(v).unwrap();
        }
        Ok(())
    }
}

impl<F: NdFloat> HasParams<F> for BatchNorm2d<F> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamTensor<F>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&mut Buffer<F>)) {
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::{max_rel_err, numeric_grad, randn, seeded};
    use ndarray::ArrayD;

    fn to4(a: ArrayD<f64>) -> Array4<f64> {
        a.into_dimensionality().unwrap()
    }

    #[test]
    fn train_forward_standardizes_each_channel() {
        let mut rng = seeded(3);
        let x = to4(randn(&[8, 3, 5, 5], 2.5, &mut rng)) + 1.7;
        let mut bn = BatchNorm2d::<f64>::new("bn", 3);
        let y = bn.forward(&x, true);
        for ci in 0..3 {
            let plane = y.index_axis(Axis(1), ci);
            let m = plane.mean().unwrap();
            let v = plane.iter().map(|&t| (t - m) * (t - m)).sum::<f64>() / plane.len() as f64;
            assert!(m.abs() < 1e-12);
            // var comes out at sigma^2 / (sigma^2 + eps), so 1 up to ~eps
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn eval_uses_running_stats() {
        let mut rng = seeded(4);
        let x = to4(randn(&[16, 2, 4, 4], 1.0, &mut rng));
        let mut bn = BatchNorm2d::<f64>::new("bn", 2);
        bn.set_running_stats(&[0.5, -0.25], &[4.0, 0.25]).unwrap();
        let y = bn.forward(&x, false);
        let want = x.index_axis(Axis(1), 0).mapv(|v| (v - 0.5) / (4.0f64 + 1e-5).sqrt());
        let got = y.index_axis(Axis(1), 0);
        let err = (&want - &got).iter().map(|v| v.abs()).fold(0.0f64, f64::max);
        assert!(err < 1e-12);
    }

    #[test]
    fn running_stats_blend_with_momentum() {
        let mut rng = seeded(5);
        let x = to4(randn(&[4, 1, 3, 3], 1.0, &mut rng)) + 2.0;
        let mut bn = BatchNorm2d::<f64>::new("bn", 1);
        bn.forward(&x, true);
        let m = 36.0;
        let mean = x.sum() / m;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m;
        let unbiased = var * m / (m - 1.0);
        let rm = bn.running_mean.value.as_slice().unwrap()[0];
        let rv = bn.running_var.value.as_slice().unwrap()[0];
        assert!((rm - 0.1 * mean).abs() < 1e-12);
        assert!((rv - (0.9 + 0.1 * unbiased)).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = seeded(6);
        let x = randn(&[4, 2, 3, 3], 1.0, &mut rng);
        let g0 = randn(&[2], 0.3, &mut rng) + 1.0;
        let b0 = randn(&[2], 0.3, &mut rng);
        let proj = randn(&[4, 2, 3, 3], 1.0, &mut rng);

        let run = |xv: &ArrayD<f64>, gv: &ArrayD<f64>, bv: &ArrayD<f64>| -> f64 {
            let mut bn = BatchNorm2d::<f64>::new("bn", 2);
            bn.gamma.value.assign(gv);
            bn.beta.value.assign(bv);
            let y = bn.forward(&to4(xv.clone()), true);
            (y.into_dyn() * &proj.view()).sum()
        };

        let mut bn = BatchNorm2d::<f64>::new("bn", 2);
        bn.gamma.value.assign(&g0);
        bn.beta.value.assign(&b0);
        bn.forward(&to4(x.clone()), true);
        let gx = bn.backward(&to4(proj.clone())).into_dyn();

        let ngx = numeric_grad(|v| run(v, &g0, &b0), &x, 1e-5);
        assert!(max_rel_err(&gx, &ngx, 1e-3) < 1e-6);
        let ngg = numeric_grad(|v| run(&x, v, &b0), &g0, 1e-5);
        assert!(max_rel_err(&bn.gamma.grad, &ngg, 1e-3) < 1e-6);
        let ngb = numeric_grad(|v| run(&x, &g0, v), &b0, 1e-5);
        assert!(max_rel_err(&bn.beta.grad, &ngb, 1e-3) < 1e-6);
    }
}
