//! Optimizers over [`HasParams`] visitation order.
//!
//! Per-parameter state is keyed by visitation index, which is stable for a
//! fixed architecture. `step` consumes the accumulated gradients and zeroes
//! them afterwards.

use ndarray::{ArrayD, NdFloat};

use super::HasParams;

pub struct Adam<F> {
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    t: u64,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: NdFloat> Adam<F> {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Adam {
            beta1: F::from(beta1).unwrap(),
            beta2: F::from(beta2).unwrap(),
            eps: F::from(1e-8).unwrap(),
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step<M: HasParams<F> + ?Sized>(&mut self, net: &mut M, lr: f64) {
        self.t += 1;
        let lr = F::from(lr).unwrap();
        let b1 = self.beta1;
        let b2 = self.beta2;
        let eps = self.eps;
        let bc1 = F::one() - b1.powi(self.t as i32);
        let bc2 = F::one() - b2.powi(self.t as i32);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut idx = 0usize;
        net.visit_params(&mut |p| {
            if m.len() <= idx {
                m.push(ArrayD::zeros(p.value.raw_dim()));
                v.push(ArrayD::zeros(p.value.raw_dim()));
            }
            let ms = m[idx].as_slice_mut().unwrap();
            let vs = v[idx].as_slice_mut().unwrap();
            let ws = p.value.as_slice_mut().unwrap();
            let gs = p.grad.as_slice_mut().unwrap();
            for i in 0..ws.len() {
                let g = gs[i];
                ms[i] = b1 * ms[i] + (F::one() - b1) * g;
                vs[i] = b2 * vs[i] + (F::one() - b2) * g * g;
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                ws[i] = ws[i] - lr * mhat / (vhat.sqrt() + eps);
                gs[i] = F::zero();
            }
            idx += 1;
        });
    }
}

/// Plain stochastic gradient descent.
pub struct Sgd;

impl Sgd {
    pub fn step<F: NdFloat, M: HasParams<F> + ?Sized>(&mut self, net: &mut M, lr: f64) {
        let lr = F::from(lr).unwrap();
        net.visit_params(&mut |p| {
            let ws = p.value.as_slice_mut().unwrap();
            let gs = p.grad.as_slice_mut().unwrap();
            for i in 0..ws.len() {
                ws[i] = ws[i] - lr * gs[i];
                gs[i] = F::zero();
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Buffer, ParamTensor};
    use ndarray::IxDyn;

    struct Quadratic {
        w: ParamTensor<f64>,
        target: ArrayD<f64>,
    }

    impl Quadratic {
        fn loss_and_grad(&mut self) -> f64 {
            let diff = &self.w.value - &self.target;
            self.w.grad.assign(&(&diff * 2.0));
            diff.iter().map(|d| d * d).sum()
        }
    }

    impl HasParams<f64> for Quadratic {
        fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamTensor<f64>)) {
            f(&mut self.w);
        }
        fn visit_buffers(&mut self, _f: &mut dyn FnMut(&mut Buffer<f64>)) {}
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut q = Quadratic {
            w: ParamTensor::zeros("w", &[8]),
            target: ArrayD::from_shape_fn(IxDyn(&[8]), |ix| ix[0] as f64 / 4.0 - 1.0),
        };
        let mut opt = Adam::new(0.9, 0.999);
        for _ in 0..2000 {
            q.loss_and_grad();
            opt.step(&mut q, 1e-2);
        }
        assert!(q.loss_and_grad() < 1e-8);
        // step() leaves gradients zeroed
        opt.step(&mut q, 0.0);
        assert!(q.w.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn sgd_minimizes_a_quadratic() {
        let mut q = Quadratic {
            w: ParamTensor::zeros("w", &[4]),
            target: ArrayD::from_elem(IxDyn(&[4]), 3.0),
        };
        let mut opt = Sgd;
        for _ in 0..200 {
            q.loss_and_grad();
            opt.step(&mut q, 0.1);
        }
        assert!(q.loss_and_grad() < 1e-10);
    }
}
