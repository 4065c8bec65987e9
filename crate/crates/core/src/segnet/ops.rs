//! Layer kernels with hand-written backward passes.
//!
//! Convolutions go through im2col and a GEMM. All convolutions use the same
//! padding rule: with kernel `k` the window of output `o` starts at input
//! `o * stride - (k - 1) / 2`. A transposed convolution is the exact adjoint
//! of the strided convolution with the same kernel, mapping `n` to
//! `n * stride`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayViewMut3, Axis};

use crate::Scalar;

/// Index mapping between the large ("image") side and the small
/// ("strided") side of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub big_h: usize,
    pub big_w: usize,
    pub small_h: usize,
    pub small_w: usize,
}

impl ConvGeom {
    pub fn new(kernel: (usize, usize), stride: usize, big_h: usize, big_w: usize) -> Self {
        Self {
            kh: kernel.0,
            kw: kernel.1,
            stride,
            pad_h: (kernel.0 - 1) / 2,
            pad_w: (kernel.1 - 1) / 2,
            big_h,
            big_w,
            small_h: big_h.div_ceil(stride),
            small_w: big_w.div_ceil(stride),
        }
    }

    fn small_len(&self) -> usize {
        self.small_h * self.small_w
    }
}

/// Range of small-side positions whose tap `k` lands inside `0..big`.
fn valid_range(
    k: usize,
    pad: usize,
    stride: usize,
    big: usize,
    small: usize,
) -> std::ops::Range<usize> {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = if big + pad > k {
        (big + pad - k - 1) / stride + 1
    } else {
        0
    };
    lo..hi.min(small)
}

/// `[c*kh*kw, small_h*small_w]` patch matrix of a `[c, big_h, big_w]` input.
fn im2col<T: Scalar>(x: ArrayView3<T>, g: &ConvGeom) -> Array2<T> {
    let c = x.dim().0;
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let cols_n = g.small_len();
    let mut cols = Array2::zeros((c * g.kh * g.kw, cols_n));
    let out = cols.as_slice_mut().unwrap();
    for ci in 0..c {
        let plane = &xs[ci * g.big_h * g.big_w..(ci + 1) * g.big_h * g.big_w];
        for ky in 0..g.kh {
            let rows = valid_range(ky, g.pad_h, g.stride, g.big_h, g.small_h);
            for kx in 0..g.kw {
                let xr = valid_range(kx, g.pad_w, g.stride, g.big_w, g.small_w);
                if xr.is_empty() {
                    continue;
                }
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut out[row * cols_n..(row + 1) * cols_n];
                let first = xr.start * g.stride + kx - g.pad_w;
                for oy in rows.clone() {
                    let iy = oy * g.stride + ky - g.pad_h;
                    let src = &plane[iy * g.big_w..(iy + 1) * g.big_w];
                    let drow = &mut dst[oy * g.small_w + xr.start..oy * g.small_w + xr.end];
                    if g.stride == 1 {
                        drow.copy_from_slice(&src[first..first + drow.len()]);
                    } else {
                        for (d, s) in drow.iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch columns into `out`.
fn col2im<T: Scalar>(cols: ArrayView2<T>, g: &ConvGeom, mut out: ArrayViewMut3<T>) {
    let c = out.dim().0;
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().unwrap();
    let cols_n = g.small_len();
    let os = out.as_slice_mut().expect("col2im target is contiguous");
    for ci in 0..c {
        let plane = &mut os[ci * g.big_h * g.big_w..(ci + 1) * g.big_h * g.big_w];
        for ky in 0..g.kh {
            let rows = valid_range(ky, g.pad_h, g.stride, g.big_h, g.small_h);
            for kx in 0..g.kw {
                let xr = valid_range(kx, g.pad_w, g.stride, g.big_w, g.small_w);
                if xr.is_empty() {
                    continue;
                }
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cs[row * cols_n..(row + 1) * cols_n];
                let first = xr.start * g.stride + kx - g.pad_w;
                for oy in rows.clone() {
                    let iy = oy * g.stride + ky - g.pad_h;
                    let dst = &mut plane[iy * g.big_w + first..(iy + 1) * g.big_w];
                    let srow = &src[oy * g.small_w + xr.start..oy * g.small_w + xr.end];
                    for (d, s) in dst.iter_mut().step_by(g.stride).zip(srow) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

fn weight_matrix<T: Scalar>(w: &Array4<T>) -> ArrayView2<'_, T> {
    let (a, b, kh, kw) = w.dim();
    w.view()
        .into_shape_with_order((a, b * kh * kw))
        .expect("weights are contiguous")
}

/// Gradients of a parametric layer.
#[derive(Debug, Clone)]
pub struct LayerGrads<T> {
    pub dx: Array4<T>,
    /// `(dw, db)`, present when parameter gradients were requested.
    pub params: Option<(Array4<T>, Array1<T>)>,
}

/// Convolution (`stride == 1`) or strided convolution.
///
/// `x: [n, ci, h, w]`, `w: [co, ci, kh, kw]`, `b: [co]`.
pub fn conv2d_forward<T: Scalar>(
    x: &Array4<T>,
    w: &Array4<T>,
    b: &Array1<T>,
    stride: usize,
) -> Array4<T> {
    let (n, _, h, wd) = x.dim();
    let (co, _, kh, kw) = w.dim();
    let g = ConvGeom::new((kh, kw), stride, h, wd);
    let wm = weight_matrix(w);
    let mut y = Array4::zeros((n, co, g.small_h, g.small_w));
    for i in 0..n {
        let cols = im2col(x.index_axis(Axis(0), i), &g);
        let mut out = y
            .index_axis_mut(Axis(0), i)
            .into_shape_with_order((co, g.small_len()))
            .unwrap();
        for (mut row, &bias) in out.outer_iter_mut().zip(b.iter()) {
            row.fill(bias);
        }
        general_mat_mul(T::one(), &wm, &cols, T::one(), &mut out);
    }
    y
}

pub fn conv2d_backward<T: Scalar>(
    x: &Array4<T>,
    w: &Array4<T>,
    dy: &Array4<T>,
    stride: usize,
    param_grads: bool,
) -> LayerGrads<T> {
    let (n, ci, h, wd) = x.dim();
    let (co, _, kh, kw) = w.dim();
    let g = ConvGeom::new((kh, kw), stride, h, wd);
    let wm = weight_matrix(w);
    let mut dx = Array4::zeros((n, ci, h, wd));
    let mut dwm = Array2::zeros(wm.raw_dim());
    let mut db = Array1::zeros(co);
    for i in 0..n {
        let dyi = dy.index_axis(Axis(0), i);
        let dy2 = dyi.into_shape_with_order((co, g.small_len())).unwrap();
        if param_grads {
            let cols = im2col(x.index_axis(Axis(0), i), &g);
            general_mat_mul(T::one(), &dy2, &cols.t(), T::one(), &mut dwm);
            db += &dy2.sum_axis(Axis(1));
        }
        let dcols = wm.t().dot(&dy2);
        col2im(dcols.view(), &g, dx.index_axis_mut(Axis(0), i));
    }
    let params = param_grads.then(|| (dwm.into_shape_with_order(w.raw_dim()).unwrap(), db));
    LayerGrads { dx, params }
}

/// Transposed convolution: `x: [n, ci, h, w]`, `w: [ci, co, kh, kw]`,
/// output `[n, co, h*stride, w*stride]`.
pub fn conv_transpose_forward<T: Scalar>(
    x: &Array4<T>,
    w: &Array4<T>,
    b: &Array1<T>,
    stride: usize,
) -> Array4<T> {
    let (n, ci, h, wd) = x.dim();
    let (_, co, kh, kw) = w.dim();
    let g = ConvGeom::new((kh, kw), stride, h * stride, wd * stride);
    let wm = weight_matrix(w);
    let mut y = Array4::zeros((n, co, g.big_h, g.big_w));
    for i in 0..n {
        let xi = x.index_axis(Axis(0), i);
        let x2 = xi.into_shape_with_order((ci, h * wd)).unwrap();
        let cols = wm.t().dot(&x2);
        let mut yi = y.index_axis_mut(Axis(0), i);
        for (mut plane, &bias) in yi.outer_iter_mut().zip(b.iter()) {
            plane.fill(bias);
        }
        col2im(cols.view(), &g, yi);
    }
    y
}

pub fn conv_transpose_backward<T: Scalar>(
    x: &Array4<T>,
    w: &Array4<T>,
    dy: &Array4<T>,
    stride: usize,
    param_grads: bool,
) -> LayerGrads<T> {
    let (n, ci, h, wd) = x.dim();
    let (_, co, kh, kw) = w.dim();
    let g = ConvGeom::new((kh, kw), stride, h * stride, wd * stride);
    let wm = weight_matrix(w);
    let mut dx = Array4::zeros((n, ci, h, wd));
    let mut dwm = Array2::zeros(wm.raw_dim());
    let mut db = Array1::zeros(co);
    for i in 0..n {
        let dcols = im2col(dy.index_axis(Axis(0), i), &g);
        let mut dxi = dx
            .index_axis_mut(Axis(0), i)
            .into_shape_with_order((ci, h * wd))
            .unwrap();
        general_mat_mul(T::one(), &wm, &dcols, T::zero(), &mut dxi);
        if param_grads {
            let xi = x.index_axis(Axis(0), i);
            let x2 = xi.into_shape_with_order((ci, h * wd)).unwrap();
            general_mat_mul(T::one(), &x2, &dcols.t(), T::one(), &mut dwm);
            let dyi = dy.index_axis(Axis(0), i);
            for (c, plane) in dyi.outer_iter().enumerate() {
                db[c] += plane.sum();
            }
        }
    }
    let params = param_grads.then(|| (dwm.into_shape_with_order(w.raw_dim()).unwrap(), db));
    LayerGrads { dx, params }
}

pub fn relu_forward<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given its input `x`.
pub fn relu_backward<T: Scalar>(x: &Array4<T>, dy: &Array4<T>) -> Array4<T> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &v| {
        if v <= T::zero() {
            *d = T::zero();
        }
    });
    dx
}

/// Fully connected layer over the flattened `[c, h, w]` input.
/// `w: [out, in, 1, 1]`; output `[n, out, 1, 1]`.
pub fn fc_forward<T: Scalar>(x: &Array4<T>, w: &Array4<T>, b: &Array1<T>) -> Array4<T> {
    let (n, c, h, wd) = x.dim();
    let out = w.dim().0;
    let x2 = x.as_standard_layout();
    let x2 = x2.view().into_shape_with_order((n, c * h * wd)).unwrap();
    let wm = weight_matrix(w);
    let mut y = x2.dot(&wm.t());
    y += b;
    y.into_shape_with_order((n, out, 1, 1)).unwrap()
}

pub fn fc_backward<T: Scalar>(
    x: &Array4<T>,
    w: &Array4<T>,
    dy: &Array4<T>,
    param_grads: bool,
) -> LayerGrads<T> {
    let (n, c, h, wd) = x.dim();
    let out = w.dim().0;
    let xs = x.as_standard_layout();
    let x2 = xs.view().into_shape_with_order((n, c * h * wd)).unwrap();
    let dy2 = dy.view().into_shape_with_order((n, out)).unwrap();
    let wm = weight_matrix(w);
    let dx = dy2.dot(&wm).into_shape_with_order((n, c, h, wd)).unwrap();
    let params = param_grads.then(|| {
        let dw = dy2.t().dot(&x2).into_shape_with_order(w.raw_dim()).unwrap();
        (dw, dy2.sum_axis(Axis(0)))
    });
    LayerGrads { dx, params }
}

/// Channel-wise concatenation `[a; b]`.
pub fn concat_channels<T: Scalar>(a: &Array4<T>, b: &Array4<T>) -> Array4<T> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("concat shapes agree")
}

/// Split a concatenated gradient back into its two parts.
pub fn split_channels<T: Scalar>(g: &Array4<T>, first: usize) -> (Array4<T>, Array4<T>) {
    (
        g.slice(s![.., ..first, .., ..]).to_owned(),
        g.slice(s![.., first.., .., ..]).to_owned(),
    )
}

/// 3x3, stride-1 average pooling that keeps the spatial size. Border
/// outputs average only the neighbours inside the map.
pub fn avg_pool3_forward<T: Scalar>(x: &Array3<T>) -> Array3<T> {
    let (c, h, w) = x.dim();
    let mut y = Array3::zeros((c, h, w));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let (mut sum, mut count) = (T::zero(), 0usize);
                for a in i.saturating_sub(1)..(i + 2).min(h) {
                    for b in j.saturating_sub(1)..(j + 2).min(w) {
                        sum += x[[ch, a, b]];
                        count += 1;
                    }
                }
                y[[ch, i, j]] = sum / T::of(count as f64);
            }
        }
    }
    y
}

pub fn avg_pool3_backward<T: Scalar>(dy: &Array3<T>) -> Array3<T> {
    let (c, h, w) = dy.dim();
    let mut dx = Array3::zeros((c, h, w));
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let rows = i.saturating_sub(1)..(i + 2).min(h);
                let cols = j.saturating_sub(1)..(j + 2).min(w);
                let share = dy[[ch, i, j]] / T::of((rows.len() * cols.len()) as f64);
                for a in rows {
                    for b in cols.clone() {
                        dx[[ch, a, b]] += share;
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn identity_kernel_is_identity() {
        let x = Array::from_shape_fn((1, 2, 5, 4), |(_, c, i, j)| (c * 20 + i * 4 + j) as f64);
        let mut w = Array4::zeros((2, 2, 3, 3));
        w[[0, 0, 1, 1]] = 1.0;
        w[[1, 1, 1, 1]] = 1.0;
        let y = conv2d_forward(&x, &w, &Array1::zeros(2), 1);
        assert_eq!(y, x);
    }

    #[test]
    fn relu_on_negative_input() {
        let x = Array4::from_elem((1, 2, 3, 3), -0.5f64);
        assert!(relu_forward(&x).iter().all(|&v| v == 0.0));
        let dy = Array4::from_elem((1, 2, 3, 3), 1.0);
        assert!(relu_backward(&x, &dy).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn strided_output_sizes() {
        let x = Array4::<f32>::zeros((1, 1, 7, 8));
        let w = Array4::zeros((3, 1, 3, 3));
        assert_eq!(
            conv2d_forward(&x, &w, &Array1::zeros(3), 2).dim(),
            (1, 3, 4, 4)
        );
        let w = Array4::zeros((1, 3, 3, 3));
        let x = Array4::<f32>::zeros((1, 1, 4, 4));
        assert_eq!(
            conv_transpose_forward(&x, &w, &Array1::zeros(3), 2).dim(),
            (1, 3, 8, 8)
        );
    }

    #[test]
    fn constant_map_survives_pooling() {
        let x = Array3::from_elem((3, 4, 5), 0.25f64);
        assert_eq!(avg_pool3_forward(&x), x);
    }
}
