//! Elementwise activations with cached backward state.

use ndarray::{Array4, NdFloat};

pub struct Relu<F> {
    mask: Option<Array4<bool>>,
    _marker: std::marker::PhantomData<F>,
}

impl<F: NdFloat> Default for Relu<F> {
    fn default() -> Self {
        Relu { mask: None, _marker: std::marker::PhantomData }
    }
}

impl<F: NdFloat> Relu<F> {
    pub fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        if train {
            self.mask = Some(x.mapv(|v| v > F::zero()));
        }
        x.mapv(|v| if v > F::zero() { v } else { F::zero() })
    }

    pub fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let mask = self.mask.take().expect("backward requires a prior forward(train=true)");
        let mut gx = gy.clone();
        ndarray::Zip::from(&mut gx).and(&mask).for_each(|g, &m| {
            if !m {
                *g = F::zero();
            }
        });
        gx
    }
}

pub struct LeakyRelu<F> {
    pub slope: F,
    mask: Option<Array4<bool>>,
}

impl<F: NdFloat> LeakyRelu<F> {
    pub fn new(slope: f64) -> Self {
        LeakyRelu { slope: F::from(slope).unwrap(), mask: None }
    }

    pub fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        if train {
            self.mask = Some(x.mapv(|v| v > F::zero()));
        }
        let a = self.slope;
        x.mapv(|v| if v > F::zero() { v } else { a * v })
    }

    pub fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let mask = self.mask.take().expect("backward requires a prior forward(train=true)");
        let a = self.slope;
        let mut gx = gy.clone();
        ndarray::Zip::from(&mut gx).and(&mask).for_each(|g, &m| {
            if !m {
                *g = a * *g;
            }
        });
        gx
    }
}

pub struct Tanh<F> {
    y: Option<Array4<F>>,
}

impl<F: NdFloat> Default for Tanh<F> {
    fn default() -> Self {
        Tanh { y: None }
    }
}

impl<F: NdFloat> Tanh<F> {
    pub fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let y = x.mapv(|v| v.tanh());
        if train {
            self.y = Some(y.clone());
        }
        y
    }

    pub fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let y = self.y.take().expect("backward requires a prior forward(train=true)");
        let mut gx = gy.clone();
        ndarray::Zip::from(&mut gx).and(&y).for_each(|g, &yv| {
            *g = *g * (F::one() - yv * yv);
        });
        gx
    }
}
