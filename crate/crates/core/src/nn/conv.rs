//! 2-D convolution and transposed convolution via im2col + GEMM.
//!
//! Batches are processed in fixed-size sample chunks ([`crate::parallel`]):
//! each chunk builds one column matrix and runs one GEMM, which keeps the
//! matrices large enough to hit BLAS-like throughput while making the chunk
//! the unit of (deterministic) parallelism. Parameter-gradient contributions
//! are reduced in chunk order.

use ndarray::{s, Array2, Array4, ArrayView2, ArrayView4, Axis, NdFloat};

use super::{Buffer, HasParams, ParamTensor};
use crate::parallel::{self, CHUNK};

/// Output extent of a convolution along one axis (floor semantics).
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(input + 2 * pad >= k, "kernel larger than padded input");
    (input + 2 * pad - k) / stride + 1
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!((input - 1) * stride + k > 2 * pad, "padding swallows the whole output");
    (input - 1) * stride + k - 2 * pad
}

/// Range `lo..hi` of output positions whose source index
/// `o*stride + k_off - pad` lands inside `[0, input)`.
fn out_range(k_off: usize, stride: usize, pad: usize, input: usize, out: usize) -> (usize, usize) {
    let lo = if k_off >= pad { 0 } else { (pad - k_off).div_ceil(stride) };
    if input + pad <= k_off {
        return (0, 0);
    }
    let hi = ((input - 1 + pad - k_off) / stride + 1).min(out);
    (lo.min(hi), hi)
}

/// Unfolds a sample chunk `(n, c, h, w)` into the column matrix
/// `(c·kh·kw, n·ho·wo)`; row `(ci·kh + ki)·kw + kj`, column
/// `s·ho·wo + oi·wo + oj` holds `x[s, ci, oi·stride + ki − pad, oj·stride + kj − pad]`
/// (zero outside the input).
pub fn im2col<F: NdFloat>(
    x: ArrayView4<'_, F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let owned;
    let xs: &[F] = match x.as_slice() {
        Some(sl) => sl,
        None => {
            owned = x.to_owned();
            owned.as_slice().unwrap()
        }
    };
    let mut col = Array2::<F>::zeros((c * kh * kw, n * ho * wo));
    let cols_len = n * ho * wo;
    let cs = col.as_slice_mut().unwrap();
    for ci in 0..c {
        for ki in 0..kh {
            let (oi_lo, oi_hi) = out_range(ki, stride, pad, h, ho);
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let row_base = row * cols_len;
                let (oj_lo, oj_hi) = out_range(kj, stride, pad, w, wo);
                if oj_lo >= oj_hi {
                    continue;
                }
                for sample in 0..n {
                    let x_base = (sample * c + ci) * h * w;
                    let dst_base = row_base + sample * ho * wo;
                    for oi in oi_lo..oi_hi {
                        let ih = oi * stride + ki - pad;
                        let src0 = x_base + ih * w + oj_lo * stride + kj - pad;
                        let dst0 = dst_base + oi * wo + oj_lo;
                        let len = oj_hi - oj_lo;
                        if stride == 1 {
                            cs[dst0..dst0 + len].copy_from_slice(&xs[src0..src0 + len]);
                        } else {
                            for t in 0..len {
                                cs[dst0 + t] = xs[src0 + t * stride];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: folds a column matrix back into an image chunk,
/// accumulating overlapping contributions.
pub fn col2im<F: NdFloat>(
    col: ArrayView2<'_, F>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    assert_eq!(col.dim(), (c * kh * kw, n * ho * wo), "column matrix shape");
    let owned;
    let cs: &[F] = match col.as_slice() {
        Some(sl) => sl,
        None => {
            owned = col.to_owned();
            owned.as_slice().unwrap()
        }
    };
    let cols_len = n * ho * wo;
    let mut x = Array4::<F>::zeros((n, c, h, w));
    let xs = x.as_slice_mut().unwrap();
    for ci in 0..c {
        for ki in 0..kh {
            let (oi_lo, oi_hi) = out_range(ki, stride, pad, h, ho);
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let row_base = row * cols_len;
                let (oj_lo, oj_hi) = out_range(kj, stride, pad, w, wo);
                if oj_lo >= oj_hi {
                    continue;
                }
                for sample in 0..n {
                    let x_base = (sample * c + ci) * h * w;
                    let src_base = row_base + sample * ho * wo;
                    for oi in oi_lo..oi_hi {
                        let ih = oi * stride + ki - pad;
                        let dst0 = x_base + ih * w + oj_lo * stride + kj - pad;
                        let src0 = src_base + oi * wo + oj_lo;
                        for t in 0..(oj_hi - oj_lo) {
                            xs[dst0 + t * stride] += cs[src0 + t];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `(n, c, h, w)` chunk → `(c, n·h·w)` matrix (sample-major columns).
fn chunk_to_mat<F: NdFloat>(x: ArrayView4<'_, F>) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let hw = h * w;
    let owned;
    let xs: &[F] = match x.as_slice() {
        Some(sl) => sl,
        None => {
            owned = x.to_owned();
            owned.as_slice().unwrap()
        }
    };
    let mut m = Array2::<F>::zeros((c, n * hw));
    let ms = m.as_slice_mut().unwrap();
    for sample in 0..n {
        for ci in 0..c {
            let src = (sample * c + ci) * hw;
            let dst = ci * (n * hw) + sample * hw;
            ms[dst..dst + hw].copy_from_slice(&xs[src..src + hw]);
        }
    }
    m
}

/// Inverse of [`chunk_to_mat`]: writes a `(c, n·h·w)` matrix into the chunk
/// `out[lo..lo + n]`.
fn mat_into_chunk<F: NdFloat>(m: &Array2<F>, out: &mut Array4<F>, lo: usize) {
    let (c, nhw) = m.dim();
    let (_, oc, h, w) = out.dim();
    assert_eq!(c, oc);
    let hw = h * w;
    let n = nhw / hw;
    let ms = m.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();
    for sample in 0..n {
        for ci in 0..c {
            let src = ci * nhw + sample * hw;
            let dst = ((lo + sample) * c + ci) * hw;
            os[dst..dst + hw].copy_from_slice(&ms[src..src + hw]);
        }
    }
}

struct ConvCache<F> {
    cols: Vec<Array2<F>>,
    in_dims: (usize, usize, usize, usize),
}

/// 2-D convolution, square kernel, symmetric zero padding.
pub struct Conv2d<F> {
    pub w: ParamTensor<F>,
    pub b: Option<ParamTensor<F>>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<ConvCache<F>>,
}

impl<F: NdFloat> Conv2d<F> {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        Conv2d {
            w: ParamTensor::zeros(format!("{name}.w"), &[cout, cin, k, k]),
            b: bias.then(|| ParamTensor::zeros(format!("{name}.b"), &[cout])),
            cin,
            cout,
            k,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let (n, cin, h, w) = x.dim();
        assert_eq!(cin, self.cin, "input channel mismatch");
        let ho = conv_out_dim(h, self.k, self.stride, self.pad);
        let wo = conv_out_dim(w, self.k, self.stride, self.pad);
        let ckk = self.cin * self.k * self.k;
        let w_mat = self.w.value.view().into_shape_with_order((self.cout, ckk)).unwrap();
        let bias = self.b.as_ref().map(|b| b.value.as_slice().unwrap().to_vec());
        let results = parallel::map_chunk_indices(parallel::n_chunks(n), |ci| {
            let lo = ci * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let xc = x.slice(s![lo..hi, .., .., ..]);
            let col = im2col(xc, self.k, self.k, self.stride, self.pad);
            let mut y = w_mat.dot(&col);
            if let Some(bs) = &bias {
                for (c, &bc) in bs.iter().enumerate() {
                    let mut row = y.row_mut(c);
                    row += bc;
                }
            }
            (y, col)
        });
        let mut out = Array4::<F>::zeros((n, self.cout, ho, wo));
        let mut cols = Vec::with_capacity(results.len());
        for (ci, (y, col)) in results.into_iter().enumerate() {
            mat_into_chunk(&y, &mut out, ci * CHUNK);
            cols.push(col);
        }
        if train {
            self.cache = Some(ConvCache { cols, in_dims: (n, cin, h, w) });
        }
        out
    }

    pub fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let cache = self.cache.take().expect("backward requires a prior forward(train=true)");
        let (n, cin, h, w) = cache.in_dims;
        let ckk = cin * self.k * self.k;
        let w_mat = self.w.value.view().into_shape_with_order((self.cout, ckk)).unwrap();
        let cols = &cache.cols;
        let results = parallel::map_chunk_indices(parallel::n_chunks(n), |ci| {
            let lo = ci * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let gy_mat = chunk_to_mat(gy.slice(s![lo..hi, .., .., ..]));
            let gw = gy_mat.dot(&cols[ci].t());
            let gb = gy_mat.sum_axis(Axis(1));
            let gcol = w_mat.t().dot(&gy_mat);
            let gx = col2im(gcol.view(), hi - lo, cin, h, w, self.k, self.k, self.stride, self.pad);
            (gx, gw, gb)
        });
        let mut gx_all = Array4::<F>::zeros((n, cin, h, w));
        let mut gw_flat = self.w.grad.view_mut().into_shape_with_order((self.cout, ckk)).unwrap();
        for (ci, (gx, gw, gb)) in results.into_iter().enumerate() {
            let lo = ci * CHUNK;
            gx_all.slice_mut(s![lo..lo + gx.dim().0, .., .., ..]).assign(&gx);
            gw_flat += &gw;
            if let Some(b) = &mut self.b {
                let bg = b.grad.as_slice_mut().unwrap();
                for (dst, &src) in bg.iter_mut().zip(gb.iter()) {
                    *dst += src;
                }
            }
        }
        gx_all
    }
}

impl<F: NdFloat> HasParams<F> for Conv2d<F> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamTensor<F>)) {
        f(&mut self.w);
        if let Some(b) = &mut self.b {
            f(b);
        }
    }

    fn visit_buffers(&mut self, _f: &mut dyn FnMut(&mut Buffer<F>)) {}
}

struct ConvTCache<F> {
    x_mats: Vec<Array2<F>>,
    in_dims: (usize, usize, usize, usize),
}

/// Transposed 2-D convolution (the adjoint of [`Conv2d`] with the same
/// geometry). Weight layout `(cin, cout, k, k)`, so a `Conv2d` weight array
/// reinterpreted here computes the exact adjoint map.
pub struct ConvTranspose2d<F> {
    pub w: ParamTensor<F>,
    pub b: Option<ParamTensor<F>>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<ConvTCache<F>>,
}

impl<F: NdFloat> ConvTranspose2d<F> {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        ConvTranspose2d {
            w: ParamTensor::zeros(format!("{name}.w"), &[cin, cout, k, k]),
            b: bias.then(|| ParamTensor::zeros(format!("{name}.b"), &[cout])),
            cin,
            cout,
            k,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array4<F>, train: bool) -> Array4<F> {
        let (n, cin, h, w) = x.dim();
        assert_eq!(cin, self.cin, "input channel mismatch");
        let ho = conv_transpose_out_dim(h, self.k, self.stride, self.pad);
        let wo = conv_transpose_out_dim(w, self.k, self.stride, self.pad);
        let ckk = self.cout * self.k * self.k;
        let w_mat = self.w.value.view().into_shape_with_order((self.cin, ckk)).unwrap();
        let bias = self.b.as_ref().map(|b| b.value.as_slice().unwrap().to_vec());
        let results = parallel::map_chunk_indices(parallel::n_chunks(n), |ci| {
            let lo = ci * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let x_mat = chunk_to_mat(x.slice(s![lo..hi, .., .., ..]));
            let prod = w_mat.t().dot(&x_mat);
            let mut y = col2im(
                prod.view(),
                hi - lo,
                self.cout,
                ho,
                wo,
                self.k,
                self.k,
                self.stride,
                self.pad,
            );
            if let Some(bs) = &bias {
                for sample in 0..(hi - lo) {
                    for (c, &bc) in bs.iter().enumerate() {
                        let mut plane = y.slice_mut(s![sample, c, .., ..]);
                        plane += bc;
                    }
                }
            }
            (y, x_mat)
        });
        let mut out = Array4::<F>::zeros((n, self.cout, ho, wo));
        let mut x_mats = Vec::with_capacity(results.len());
        for (ci, (y, x_mat)) in results.into_iter().enumerate() {
            let lo = ci * CHUNK;
            out.slice_mut(s![lo..lo + y.dim().0, .., .., ..]).assign(&y);
            x_mats.push(x_mat);
        }
        if train {
            self.cache = Some(ConvTCache { x_mats, in_dims: (n, cin, h, w) });
        }
        out
    }

    pub fn backward(&mut self, gy: &Array4<F>) -> Array4<F> {
        let cache = self.cache.take().expect("backward requires a prior forward(train=true)");
        let (n, cin, h, w) = cache.in_dims;
        let ckk = self.cout * self.k * self.k;
        let w_mat = self.w.value.view().into_shape_with_order((self.cin, ckk)).unwrap();
        let x_mats = &cache.x_mats;
        let results = parallel::map_chunk_indices(parallel::n_chunks(n), |ci| {
            let lo = ci * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let gyc = gy.slice(s![lo..hi, .., .., ..]);
            let gcol = im2col(gyc, self.k, self.k, self.stride, self.pad);
            let gx_mat = w_mat.dot(&gcol);
            let gw = x_mats[ci].dot(&gcol.t());
            let gb = gyc.sum_axis(Axis(0)).sum_axis(Axis(1)).sum_axis(Axis(1));
            (gx_mat, gw, gb)
        });
        let mut gx_all = Array4::<F>::zeros((n, cin, h, w));
        let mut gw_flat = self.w.grad.view_mut().into_shape_with_order((self.cin, ckk)).unwrap();
        for (ci, (gx_mat, gw, gb)) in results.into_iter().enumerate() {
            mat_into_chunk(&gx_mat, &mut gx_all, ci * CHUNK);
            gw_flat += &gw;
            if let Some(b) = &mut self.b {
                let bg = b.grad.as_slice_mut().unwrap();
                for (dst, &src) in bg.iter_mut().zip(gb.iter()) {
                    *dst += src;
                }
            }
        }
        gx_all
    }
}

impl<F: NdFloat> HasParams<F> for ConvTranspose2d<F> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamTensor<F>)) {
        f(&mut self.w);
        if let Some(b) = &mut self.b {
            f(b);
        }
    }

    fn visit_buffers(&mut self, _f: &mut dyn FnMut(&mut Buffer<F>)) {}
}
