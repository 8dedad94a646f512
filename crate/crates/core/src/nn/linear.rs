//! Dense layer and global average pooling (the classifier head).

use ndarray::{Array2, Array4, Axis, NdFloat};

use super::{Buffer, HasParams, ParamTensor};

pub struct Linear<F> {
    pub w: ParamTensor<F>,
    pub b: ParamTensor<F>,
    pub d_in: usize,
    pub d_out: usize,
    cache: Option<Array2<F>>,
}

impl<F: NdFloat> Linear<F> {
    pub fn new(name: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            w: ParamTensor::zeros(format!("{name}.w"), &[d_out, d_in]),
            b: ParamTensor::zeros(format!("{name}.b"), &[d_out]),
            d_in,
            d_out,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<F>, train: bool) -> Array2<F> {
        assert_eq!(x.dim().1, self.d_in, "input width mismatch");
        let w = self.w.value.view().into_shape_with_order((self.d_out, self.d_in)).unwrap();
        let mut y = x.dot(&w.t());
        let bs = self.b.value.as_slice().unwrap();
        for (c, &bc) in bs.iter().enumerate() {
            let mut col = y.column_mut(c);
            col += bc;
        }
        if train {
            self.cache = Some(x.clone());
        }
        y
    }

    pub fn backward(&mut self, gy: &Array2<F>) -> Array2<F> {
        let x = self.cache.take().expect("backward requires a prior forward(train=true)");
        let w = self.w.value.view().into_shape_with_order((self.d_out, self.d_in)).unwrap();
        let gw = gy.t().dot(&x);
        let mut wg = self.w.grad.view_mut().into_shape_with_order((self.d_out, self.d_in)).unwrap();
        wg += &gw;
        let gb = gy.sum_axis(Axis(0));
        let bg = self.b.grad.as_slice_mut().unwrap();
        for (dst, &src) in bg.iter_mut().zip(gb.iter()) {
            *dst += src;
        }
        gy.dot(&w)
    }
}

impl<F: NdFloat> HasParams<F> for Linear<F> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamTensor<F>)) {
        f(&mut self.w);
        f(&mut self.b);
    }

    fn visit_buffers(&mut self, _f: &mut dyn FnMut(&mut Buffer<F>)) {}
}

/// Mean over the spatial extent: `(N, C, H, W)` → `(N, C)`.
#[derive(Default)]
pub struct GlobalAvgPool {
    hw: Option<(usize, usize)>,
}

impl GlobalAvgPool {
    pub fn forward<F: NdFloat>(&mut self, x: &Array4<F>, train: bool) -> Array2<F> {
        let (_, _, h, w) = x.dim();
        if train {
            self.hw = Some((h, w));
        }
        let scale = F::one() / F::from(h * w).unwrap();
        x.sum_axis(Axis(3)).sum_axis(Axis(2)).mapv(|v| v * scale)
    }

    pub fn backward<F: NdFloat>(&mut self, gy: &Array2<F>, n: usize, c: usize) -> Array4<F> {
        let (h, w) = self.hw.take().expect("backward requires a prior forward(train=true)");
        let scale = F::one() / F::from(h * w).unwrap();
        let mut gx = Array4::<F>::zeros((n, c, h, w));
        for s in 0..n {
            for ci in 0..c {
                let g = gy[[s, ci]] * scale;
                gx.index_axis_mut(Axis(0), s).index_axis_mut(Axis(0), ci).fill(g);
            }
        }
        gx
    }
}
