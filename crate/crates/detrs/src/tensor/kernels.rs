//! Dense NCHW compute kernels: convolution (via im2col + GEMM), pooling,
//! normalization, resampling, fully connected layers and ROI cropping.
//!
//! Kernels are generic over `f32`/`f64`. Forward passes are used by both the
//! training tape and the inference engine; the `*_grad_*` functions implement
//! the exact adjoints used for backpropagation. Batch elements (or spatial
//! chunks when the batch is 1) are processed through [`crate::par`], so the
//! sequential and parallel builds produce identical results.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView3, ArrayView4, Axis, NdFloat};

use crate::par;

/// Output spatial size of a convolution along one axis.
pub fn conv_out_len(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Lay out the receptive fields of `x` (one image, CHW) as a
/// `(C*k*k, out_h*out_w)` matrix, restricted to output rows in `rows`.
fn im2col_rows<F: NdFloat>(
    x: &ArrayView3<F>,
    k: usize,
    stride: usize,
    pad: usize,
    rows: std::ops::Range<usize>,
) -> Array2<F> {
    let (c, h, w) = x.dim();
    let out_w = conv_out_len(w, k, stride, pad);
    let n_rows = rows.len();
    let mut col = Array2::<F>::zeros((c * k * k, n_rows * out_w));
    for ci in 0..c {
        let plane = x.index_axis(Axis(0), ci);
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let mut dst = col.row_mut(r);
                for (ri, oy) in rows.clone().enumerate() {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..out_w {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[ri * out_w + ox] = plane[(iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col_rows`] over the full output: scatter-add columns back
/// into an image of shape `(c, h, w)`.
fn col2im<F: NdFloat>(
    col: &Array2<F>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<F> {
    let out_h = conv_out_len(h, k, stride, pad);
    let out_w = conv_out_len(w, k, stride, pad);
    let mut img = Array3::<F>::zeros((c, h, w));
    for ci in 0..c {
        let mut plane = img.index_axis_mut(Axis(0), ci);
        for ky in 0..k {
            for kx in 0..k {
                let src = col.row((ci * k + ky) * k + kx);
                for oy in 0..out_h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..out_w {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        plane[(iy as usize, ix as usize)] += src[oy * out_w + ox];
                    }
                }
            }
        }
    }
    img
}

fn conv2d_single<F: NdFloat>(
    x: &ArrayView3<F>,
    w2d: &Array2<F>,
    bias: Option<&Array1<F>>,
    k: usize,
    stride: usize,
    pad: usize,
    chunked: bool,
) -> Array3<F> {
    let (_, h, wd) = x.dim();
    let out_h = conv_out_len(h, k, stride, pad);
    let out_w = conv_out_len(wd, k, stride, pad);
    let c_out = w2d.nrows();
    let mut out = Array3::<F>::zeros((c_out, out_h, out_w));
    let row_ranges = if chunked {
        par::ranges(out_h)
    } else {
        vec![0..out_h]
    };
    let pieces = par::map_collect(row_ranges.len(), |i| {
        let r = row_ranges[i].clone();
        let col = im2col_rows(x, k, stride, pad, r.clone());
        (r, w2d.dot(&col))
    });
    for (r, piece) in pieces {
        let n_rows = r.len();
        let shaped = piece.into_shape_with_order((c_out, n_rows, out_w)).unwrap();
        out.slice_mut(s![.., r.start..r.end, ..]).assign(&shaped);
    }
    if let Some(b) = bias {
        for ci in 0..c_out {
            out.index_axis_mut(Axis(0), ci).mapv_inplace(|v| v + b[ci]);
        }
    }
    out
}

/// 2-D convolution on NCHW input with OIHW weights.
pub fn conv2d<F: NdFloat>(
    x: &ArrayView4<F>,
    w: &ArrayView4<F>,
    bias: Option<&Array1<F>>,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (n, c_in, h, wd) = x.dim();
    let (c_out, wc_in, k, k2) = w.dim();
    assert_eq!(c_in, wc_in, "conv2d: channel mismatch");
    assert_eq!(k, k2, "conv2d: non-square kernel");
    let out_h = conv_out_len(h, k, stride, pad);
    let out_w = conv_out_len(wd, k, stride, pad);
    let w2d = w
        .to_shape((c_out, c_in * k * k))
        .expect("weight reshape")
        .to_owned();
    let outs = par::map_collect(n, |i| {
        conv2d_single(&x.index_axis(Axis(0), i), &w2d, bias, k, stride, pad, n == 1)
    });
    let mut out = Array4::<F>::zeros((n, c_out, out_h, out_w));
    for (i, o) in outs.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&o);
    }
    out
}

/// Gradient of `conv2d` with respect to the input.
pub fn conv2d_grad_input<F: NdFloat>(
    w: &ArrayView4<F>,
    gy: &ArrayView4<F>,
    in_h: usize,
    in_w: usize,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (n, c_out, out_h, out_w) = gy.dim();
    let (wc_out, c_in, k, _) = w.dim();
    assert_eq!(c_out, wc_out);
    let w2d = w
        .to_shape((c_out, c_in * k * k))
        .expect("weight reshape")
        .to_owned();
    let wt = w2d.t().to_owned();
    let gxs = par::map_collect(n, |i| {
        let gyn = gy
            .index_axis(Axis(0), i)
            .to_shape((c_out, out_h * out_w))
            .unwrap()
            .to_owned();
        let col_grad = wt.dot(&gyn);
        col2im(&col_grad, c_in, in_h, in_w, k, stride, pad)
    });
    let mut gx = Array4::<F>::zeros((n, c_in, in_h, in_w));
    for (i, g) in gxs.into_iter().enumerate() {
        gx.index_axis_mut(Axis(0), i).assign(&g);
    }
    gx
}

/// Gradient of `conv2d` with respect to the weights.
pub fn conv2d_grad_weight<F: NdFloat>(
    x: &ArrayView4<F>,
    gy: &ArrayView4<F>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (n, c_in, _, _) = x.dim();
    let (_, c_out, out_h, out_w) = gy.dim();
    let partials = par::map_collect(n, |i| {
        let col = im2col_rows(&x.index_axis(Axis(0), i), k, stride, pad, 0..out_h);
        let gyn = gy
            .index_axis(Axis(0), i)
            .to_shape((c_out, out_h * out_w))
            .unwrap()
            .to_owned();
        gyn.dot(&col.t())
    });
    let mut acc = Array2::<F>::zeros((c_out, c_in * k * k));
    for p in partials {
        acc += &p;
    }
    acc.into_shape_with_order((c_out, c_in, k, k)).unwrap()
}

/// Gradient of `conv2d` with respect to the bias.
pub fn conv2d_grad_bias<F: NdFloat>(gy: &ArrayView4<F>) -> Array1<F> {
    let (_, c_out, _, _) = gy.dim();
    let mut gb = Array1::<F>::zeros(c_out);
    for ci in 0..c_out {
        gb[ci] = gy.index_axis(Axis(1), ci).sum();
    }
    gb
}

/// Transposed 2-D convolution (fractionally strided). Weights are stored
/// IOHW, i.e. `(c_in, c_out, k, k)`. Output size along one axis is
/// `(in - 1) * stride - 2*pad + k + output_pad`.
pub fn conv2d_transpose<F: NdFloat>(
    x: &ArrayView4<F>,
    w: &ArrayView4<F>,
    bias: Option<&Array1<F>>,
    stride: usize,
    pad: usize,
    output_pad: usize,
) -> Array4<F> {
    let (n, c_in, h, wd) = x.dim();
    let (wc_in, c_out, k, _) = w.dim();
    assert_eq!(c_in, wc_in, "conv2d_transpose: channel mismatch");
    let out_h = (h - 1) * stride + k + output_pad - 2 * pad;
    let out_w = (wd - 1) * stride + k + output_pad - 2 * pad;
    // Forward here is the adjoint of a regular conv mapping (out_h, out_w)
    // down to (h, w); output_pad picks the tallest preimage consistent with
    // the stride arithmetic.
    debug_assert_eq!(conv_out_len(out_h, k, stride, pad), h);
    let w2d = w
        .to_shape((c_in, c_out * k * k))
        .expect("weight reshape")
        .to_owned();
    let wt = w2d.t().to_owned();
    let outs = par::map_collect(n, |i| {
        let xn = x
            .index_axis(Axis(0), i)
            .to_shape((c_in, h * wd))
            .unwrap()
            .to_owned();
        let col = wt.dot(&xn);
        let mut img = col2im(&col, c_out, out_h, out_w, k, stride, pad);
        if let Some(b) = bias {
            for ci in 0..c_out {
                img.index_axis_mut(Axis(0), ci).mapv_inplace(|v| v + b[ci]);
            }
        }
        img
    });
    let mut out = Array4::<F>::zeros((n, c_out, out_h, out_w));
    for (i, o) in outs.into_iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&o);
    }
    out
}

/// Gradient of `conv2d_transpose` with respect to the input: a regular
/// convolution of the output gradient with the same weights.
pub fn conv2d_transpose_grad_input<F: NdFloat>(
    w: &ArrayView4<F>,
    gy: &ArrayView4<F>,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (n, _, out_h, out_w) = gy.dim();
    let (c_in, c_out, k, _) = w.dim();
    let w2d = w
        .to_shape((c_in, c_out * k * k))
        .expect("weight reshape")
        .to_owned();
    let in_h = conv_out_len(out_h, k, stride, pad);
    let in_w = conv_out_len(out_w, k, stride, pad);
    let gxs = par::map_collect(n, |i| {
        let col = im2col_rows(&gy.index_axis(Axis(0), i), k, stride, pad, 0..in_h);
        w2d.dot(&col)
    });
    let mut gx = Array4::<F>::zeros((n, c_in, in_h, in_w));
    for (i, g) in gxs.into_iter().enumerate() {
        let shaped = g.into_shape_with_order((c_in, in_h, in_w)).unwrap();
        gx.index_axis_mut(Axis(0), i).assign(&shaped);
    }
    gx
}

/// Gradient of `conv2d_transpose` with respect to the weights.
pub fn conv2d_transpose_grad_weight<F: NdFloat>(
    x: &ArrayView4<F>,
    gy: &ArrayView4<F>,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (n, c_in, h, wd) = x.dim();
    let (_, c_out, out_h, out_w) = gy.dim();
    let partials = par::map_collect(n, |i| {
        let xn = x
            .index_axis(Axis(0), i)
            .to_shape((c_in, h * wd))
            .unwrap()
            .to_owned();
        let col = im2col_rows(&gy.index_axis(Axis(0), i), k, stride, pad, 0..h);
        debug_assert_eq!(col.ncols(), h * wd);
        debug_assert_eq!(col.nrows(), c_out * k * k);
        xn.dot(&col.t())
    });
    let _ = (out_h, out_w);
    let mut acc = Array2::<F>::zeros((c_in, c_out * k * k));
    for p in partials {
        acc += &p;
    }
    acc.into_shape_with_order((c_in, c_out, k, k)).unwrap()
}

/// Max pooling; returns the pooled map and per-output flat argmax indices
/// into the input plane (ties broken by the first index scanned).
pub fn maxpool2d<F: NdFloat>(
    x: &ArrayView4<F>,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Array4<F>, Array4<usize>) {
    let (n, c, h, w) = x.dim();
    let out_h = conv_out_len(h, k, stride, pad);
    let out_w = conv_out_len(w, k, stride, pad);
    let mut y = Array4::<F>::zeros((n, c, out_h, out_w));
    let mut arg = Array4::<usize>::zeros((n, c, out_h, out_w));
    let results = par::map_collect(n * c, |nc| {
        let (ni, ci) = (nc / c, nc % c);
        let plane = x.slice(s![ni, ci, .., ..]);
        let mut yp = Array2::<F>::zeros((out_h, out_w));
        let mut ap = Array2::<usize>::zeros((out_h, out_w));
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut best = F::neg_infinity();
                let mut best_idx = 0usize;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let v = plane[(iy as usize, ix as usize)];
                        if v > best {
                            best = v;
                            best_idx = iy as usize * w + ix as usize;
                        }
                    }
                }
                yp[(oy, ox)] = best;
                ap[(oy, ox)] = best_idx;
            }
        }
        (yp, ap)
    });
    for (nc, (yp, ap)) in results.into_iter().enumerate() {
        let (ni, ci) = (nc / c, nc % c);
        y.slice_mut(s![ni, ci, .., ..]).assign(&yp);
        arg.slice_mut(s![ni, ci, .., ..]).assign(&ap);
    }
    (y, arg)
}

/// Scatter pooled gradients back through the saved argmax indices.
pub fn maxpool2d_grad<F: NdFloat>(
    gy: &ArrayView4<F>,
    arg: &Array4<usize>,
    in_h: usize,
    in_w: usize,
) -> Array4<F> {
    let (n, c, out_h, out_w) = gy.dim();
    let mut gx = Array4::<F>::zeros((n, c, in_h, in_w));
    for ni in 0..n {
        for ci in 0..c {
            let mut plane = gx.slice_mut(s![ni, ci, .., ..]);
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let idx = arg[(ni, ci, oy, ox)];
                    plane[(idx / in_w, idx % in_w)] += gy[(ni, ci, oy, ox)];
                }
            }
        }
    }
    gx
}

/// Global average pooling NCHW -> NC.
pub fn global_avg_pool<F: NdFloat>(x: &ArrayView4<F>) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let scale = F::one() / F::from(h * w).unwrap();
    let mut y = Array2::<F>::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            y[(ni, ci)] = x.slice(s![ni, ci, .., ..]).sum() * scale;
        }
    }
    y
}

/// 2x nearest-neighbor upsampling.
pub fn upsample_nearest2<F: NdFloat>(x: &ArrayView4<F>) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::<F>::zeros((n, c, h * 2, w * 2));
    for ni in 0..n {
        for ci in 0..c {
            let src = x.slice(s![ni, ci, .., ..]);
            let mut dst = y.slice_mut(s![ni, ci, .., ..]);
            for i in 0..h * 2 {
                for j in 0..w * 2 {
                    dst[(i, j)] = src[(i / 2, j / 2)];
                }
            }
        }
    }
    y
}

/// Adjoint of 2x nearest upsampling: sum each 2x2 cell.
pub fn upsample_nearest2_grad<F: NdFloat>(gy: &ArrayView4<F>) -> Array4<F> {
    let (n, c, h2, w2) = gy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array4::<F>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let src = gy.slice(s![ni, ci, .., ..]);
            let mut dst = gx.slice_mut(s![ni, ci, .., ..]);
            for i in 0..h2 {
                for j in 0..w2 {
                    dst[(i / 2, j / 2)] += src[(i, j)];
                }
            }
        }
    }
    gx
}

/// Per-channel batch statistics over the (N, H, W) axes. Variance is biased.
pub fn batch_stats<F: NdFloat>(x: &ArrayView4<F>) -> (Array1<F>, Array1<F>) {
    let (n, c, h, w) = x.dim();
    let count = F::from(n * h * w).unwrap();
    let mut mean = Array1::<F>::zeros(c);
    let mut var = Array1::<F>::zeros(c);
    for ci in 0..c {
        let plane = x.index_axis(Axis(1), ci);
        let m = plane.sum() / count;
        let v = plane.fold(F::zero(), |acc, &e| acc + (e - m) * (e - m)) / count;
        mean[ci] = m;
        var[ci] = v;
    }
    (mean, var)
}

/// Normalize with the given per-channel statistics and affine parameters.
pub fn batchnorm_apply<F: NdFloat>(
    x: &ArrayView4<F>,
    mean: &Array1<F>,
    var: &Array1<F>,
    gamma: &Array1<F>,
    beta: &Array1<F>,
    eps: F,
) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::<F>::zeros((n, c, h, w));
    for ci in 0..c {
        let inv = (var[ci] + eps).sqrt().recip();
        let (g, b, m) = (gamma[ci], beta[ci], mean[ci]);
        let src = x.index_axis(Axis(1), ci);
        let mut dst = y.index_axis_mut(Axis(1), ci);
        dst.zip_mut_with(&src, |d, &s| *d = (s - m) * inv * g + b);
    }
    y
}

/// Backward through train-mode batch normalization (statistics computed from
/// this batch). Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn batchnorm_train_grad<F: NdFloat>(
    x: &ArrayView4<F>,
    gy: &ArrayView4<F>,
    mean: &Array1<F>,
    var: &Array1<F>,
    gamma: &Array1<F>,
    eps: F,
) -> (Array4<F>, Array1<F>, Array1<F>) {
    let (n, c, h, w) = x.dim();
    let m = F::from(n * h * w).unwrap();
    let mut gx = Array4::<F>::zeros((n, c, h, w));
    let mut dgamma = Array1::<F>::zeros(c);
    let mut dbeta = Array1::<F>::zeros(c);
    for ci in 0..c {
        let inv = (var[ci] + eps).sqrt().recip();
        let mu = mean[ci];
        let xs = x.index_axis(Axis(1), ci);
        let gs = gy.index_axis(Axis(1), ci);
        let sum_gy = gs.sum();
        let sum_gy_xhat = xs
            .iter()
            .zip(gs.iter())
            .fold(F::zero(), |acc, (&xv, &gv)| acc + gv * (xv - mu) * inv);
        dgamma[ci] = sum_gy_xhat;
        dbeta[ci] = sum_gy;
        let scale = gamma[ci] * inv / m;
        let mut dst = gx.index_axis_mut(Axis(1), ci);
        ndarray::Zip::from(&mut dst).and(&xs).and(&gs).for_each(|d, &xv, &gv| {
            let xhat = (xv - mu) * inv;
            *d = scale * (m * gv - sum_gy - xhat * sum_gy_xhat);
        });
    }
    (gx, dgamma, dbeta)
}

/// Backward through eval-mode batch normalization (fixed statistics).
pub fn batchnorm_eval_grad<F: NdFloat>(
    x: &ArrayView4<F>,
    gy: &ArrayView4<F>,
    mean: &Array1<F>,
    var: &Array1<F>,
    gamma: &Array1<F>,
    eps: F,
) -> (Array4<F>, Array1<F>, Array1<F>) {
    let (n, c, h, w) = x.dim();
    let mut gx = Array4::<F>::zeros((n, c, h, w));
    let mut dgamma = Array1::<F>::zeros(c);
    let mut dbeta = Array1::<F>::zeros(c);
    for ci in 0..c {
        let inv = (var[ci] + eps).sqrt().recip();
        let mu = mean[ci];
        let xs = x.index_axis(Axis(1), ci);
        let gs = gy.index_axis(Axis(1), ci);
        dbeta[ci] = gs.sum();
        dgamma[ci] = xs
            .iter()
            .zip(gs.iter())
            .fold(F::zero(), |acc, (&xv, &gv)| acc + gv * (xv - mu) * inv);
        let scale = gamma[ci] * inv;
        let mut dst = gx.index_axis_mut(Axis(1), ci);
        dst.zip_mut_with(&gs, |d, &gv| *d = gv * scale);
    }
    (gx, dgamma, dbeta)
}

/// Fully connected layer: `y = x · wᵀ + b` with `w` of shape `(out, in)`.
pub fn linear<F: NdFloat>(x: &Array2<F>, w: &Array2<F>, b: Option<&Array1<F>>) -> Array2<F> {
    let mut y = x.dot(&w.t());
    if let Some(b) = b {
        y += &b.view().insert_axis(Axis(0));
    }
    y
}

pub fn sigmoid<F: NdFloat>(v: F) -> F {
    F::one() / (F::one() + (-v).exp())
}

pub fn silu<F: NdFloat>(v: F) -> F {
    v * sigmoid(v)
}

/// d/dx silu(x) = sigma(x) * (1 + x * (1 - sigma(x)))
pub fn silu_grad<F: NdFloat>(v: F) -> F {
    let s = sigmoid(v);
    s * (F::one() + v * (F::one() - s))
}

/// A single region crop used by [`roi_align`]: box coordinates are in the
/// pixel units of the feature map being sampled.
#[derive(Debug, Clone, Copy)]
pub struct RoiRef {
    pub batch: usize,
    pub ymin: f64,
    pub xmin: f64,
    pub ymax: f64,
    pub xmax: f64,
}

fn bilinear_taps(coord: f64, limit: usize) -> (usize, usize, f64) {
    let c = coord.clamp(0.0, (limit - 1) as f64);
    let lo = c.floor() as usize;
    let hi = (lo + 1).min(limit - 1);
    (lo, hi, c - lo as f64)
}

/// ROI-align crop: one bilinear sample at the center of each output bin.
pub fn roi_align<F: NdFloat>(feat: &ArrayView4<F>, rois: &[RoiRef], out: usize) -> Array4<F> {
    let (_, c, h, w) = feat.dim();
    let mut y = Array4::<F>::zeros((rois.len(), c, out, out));
    let crops = par::map_collect(rois.len(), |ri| {
        let r = rois[ri];
        let bh = (r.ymax - r.ymin) / out as f64;
        let bw = (r.xmax - r.xmin) / out as f64;
        let mut crop = Array3::<F>::zeros((c, out, out));
        for oy in 0..out {
            let sy = r.ymin + (oy as f64 + 0.5) * bh - 0.5;
            let (y0, y1, fy) = bilinear_taps(sy, h);
            for ox in 0..out {
                let sx = r.xmin + (ox as f64 + 0.5) * bw - 0.5;
                let (x0, x1, fx) = bilinear_taps(sx, w);
                let w00 = F::from((1.0 - fy) * (1.0 - fx)).unwrap();
                let w01 = F::from((1.0 - fy) * fx).unwrap();
                let w10 = F::from(fy * (1.0 - fx)).unwrap();
                let w11 = F::from(fy * fx).unwrap();
                for ci in 0..c {
                    let v = feat[(r.batch, ci, y0, x0)] * w00
                        + feat[(r.batch, ci, y0, x1)] * w01
                        + feat[(r.batch, ci, y1, x0)] * w10
                        + feat[(r.batch, ci, y1, x1)] * w11;
                    crop[(ci, oy, ox)] = v;
                }
            }
        }
        crop
    });
    for (ri, crop) in crops.into_iter().enumerate() {
        y.index_axis_mut(Axis(0), ri).assign(&crop);
    }
    y
}

/// Scatter crop gradients back into a feature-map gradient.
pub fn roi_align_grad<F: NdFloat>(
    gy: &ArrayView4<F>,
    rois: &[RoiRef],
    feat_dim: (usize, usize, usize, usize),
) -> Array4<F> {
    let (_, c, h, w) = feat_dim;
    let out = gy.shape()[2];
    let mut gx = Array4::<F>::zeros(feat_dim);
    for (ri, r) in rois.iter().enumerate() {
        let bh = (r.ymax - r.ymin) / out as f64;
        let bw = (r.xmax - r.xmin) / out as f64;
        for oy in 0..out {
            let sy = r.ymin + (oy as f64 + 0.5) * bh - 0.5;
            let (y0, y1, fy) = bilinear_taps(sy, h);
            for ox in 0..out {
                let sx = r.xmin + (ox as f64 + 0.5) * bw - 0.5;
                let (x0, x1, fx) = bilinear_taps(sx, w);
                let w00 = F::from((1.0 - fy) * (1.0 - fx)).unwrap();
                let w01 = F::from((1.0 - fy) * fx).unwrap();
                let w10 = F::from(fy * (1.0 - fx)).unwrap();
                let w11 = F::from(fy * fx).unwrap();
                for ci in 0..c {
                    let g = gy[(ri, ci, oy, ox)];
                    gx[(r.batch, ci, y0, x0)] += g * w00;
                    gx[(r.batch, ci, y0, x1)] += g * w01;
                    gx[(r.batch, ci, y1, x0)] += g * w10;
                    gx[(r.batch, ci, y1, x1)] += g * w11;
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randn4(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
        Array::from_shape_fn(dim, |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite difference of a scalar functional of one array input.
    fn fd_grad<D: ndarray::Dimension>(
        f: &dyn Fn(&Array<f64, D>) -> f64,
        x: &Array<f64, D>,
        eps: f64,
    ) -> Array<f64, D> {
        let mut g = Array::<f64, D>::zeros(x.raw_dim());
        let mut xp = x.clone();
        for idx in 0..x.len() {
            let orig = xp.as_slice_mut().unwrap()[idx];
            xp.as_slice_mut().unwrap()[idx] = orig + eps;
            let fp = f(&xp);
            xp.as_slice_mut().unwrap()[idx] = orig - eps;
            let fm = f(&xp);
            xp.as_slice_mut().unwrap()[idx] = orig;
            g.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * eps);
        }
        g
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        for (i, (x, y)) in a.iter().zip(b.iter()).enumerate() {
            let denom = x.abs().max(y.abs()).max(1.0);
            assert!(
                (x - y).abs() / denom < tol,
                "mismatch at {i}: {x} vs {y}"
            );
        }
    }

    #[test]
    fn conv2d_matches_direct_computation() {
        // 1x1 input channel, 3x3 kernel, identity-style check
        let x = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, i, j)| (i * 4 + j) as f64);
        let mut w = Array4::<f64>::zeros((1, 1, 3, 3));
        w[(0, 0, 1, 1)] = 1.0; // center tap = identity under pad 1
        let y = conv2d(&x.view(), &w.view(), None, 1, 1);
        assert_eq!(y, x);
    }

    #[test]
    fn conv2d_stride2_shape() {
        let x = Array4::<f64>::zeros((2, 3, 8, 8));
        let w = Array4::<f64>::zeros((5, 3, 3, 3));
        let y = conv2d(&x.view(), &w.view(), None, 2, 1);
        assert_eq!(y.dim(), (2, 5, 4, 4));
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = randn4(&mut rng, (2, 2, 5, 5));
        let w = randn4(&mut rng, (3, 2, 3, 3));
        let b = arr1(&[0.1, -0.2, 0.3]);
        let gy = randn4(&mut rng, (2, 3, 3, 3));
        let loss = |xx: &Array4<f64>, ww: &Array4<f64>, bb: &Array1<f64>| {
            let y = conv2d(&xx.view(), &ww.view(), Some(bb), 2, 1);
            (&y * &gy).sum()
        };
        let gx = conv2d_grad_input(&w.view(), &gy.view(), 5, 5, 2, 1);
        let gw = conv2d_grad_weight(&x.view(), &gy.view(), 3, 2, 1);
        let gb = conv2d_grad_bias(&gy.view());
        let fgx = fd_grad(&|xx| loss(xx, &w, &b), &x, 1e-6);
        let fgw = fd_grad(&|ww| loss(&x, ww, &b), &w, 1e-6);
        let fgb = fd_grad(&|bb| loss(&x, &w, bb), &b, 1e-6);
        assert_close(gx.as_slice().unwrap(), fgx.as_slice().unwrap(), 1e-7);
        assert_close(gw.as_slice().unwrap(), fgw.as_slice().unwrap(), 1e-7);
        assert_close(gb.as_slice().unwrap(), fgb.as_slice().unwrap(), 1e-7);
    }

    #[test]
    fn conv2d_transpose_doubles_resolution() {
        let x = Array4::<f64>::ones((1, 2, 14, 14));
        let w = Array4::<f64>::ones((2, 3, 3, 3));
        let y = conv2d_transpose(&x.view(), &w.view(), None, 2, 1, 1);
        assert_eq!(y.dim(), (1, 3, 28, 28));
    }

    #[test]
    fn conv2d_transpose_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn4(&mut rng, (2, 2, 4, 4));
        let w = randn4(&mut rng, (2, 3, 3, 3));
        let gy = randn4(&mut rng, (2, 3, 8, 8));
        let loss = |xx: &Array4<f64>, ww: &Array4<f64>| {
            let y = conv2d_transpose(&xx.view(), &ww.view(), None, 2, 1, 1);
            (&y * &gy).sum()
        };
        let gx = conv2d_transpose_grad_input(&w.view(), &gy.view(), 2, 1);
        let gw = conv2d_transpose_grad_weight(&x.view(), &gy.view(), 3, 2, 1);
        let fgx = fd_grad(&|xx| loss(xx, &w), &x, 1e-6);
        let fgw = fd_grad(&|ww| loss(&x, ww), &w, 1e-6);
        assert_close(gx.as_slice().unwrap(), fgx.as_slice().unwrap(), 1e-7);
        assert_close(gw.as_slice().unwrap(), fgw.as_slice().unwrap(), 1e-7);
    }

    #[test]
    fn maxpool_forward_and_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn4(&mut rng, (1, 2, 6, 6));
        let (y, arg) = maxpool2d(&x.view(), 3, 2, 1);
        assert_eq!(y.dim(), (1, 2, 3, 3));
        let gy = randn4(&mut rng, (1, 2, 3, 3));
        let gx = maxpool2d_grad(&gy.view(), &arg, 6, 6);
        // FD on maxpool is valid away from ties; random floats never tie.
        let f = |xx: &Array4<f64>| (&maxpool2d(&xx.view(), 3, 2, 1).0 * &gy).sum();
        let fgx = fd_grad(&f, &x, 1e-6);
        assert_close(gx.as_slice().unwrap(), fgx.as_slice().unwrap(), 1e-6);
    }

    #[test]
    fn batchnorm_train_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = randn4(&mut rng, (2, 3, 3, 3));
        let gamma = arr1(&[1.1, 0.9, 1.3]);
        let beta = arr1(&[0.0, 0.2, -0.1]);
        let gy = randn4(&mut rng, (2, 3, 3, 3));
        let eps = 1e-3;
        let f = |xx: &Array4<f64>| {
            let (m, v) = batch_stats(&xx.view());
            let y = batchnorm_apply(&xx.view(), &m, &v, &gamma, &beta, eps);
            (&y * &gy).sum()
        };
        let (m, v) = batch_stats(&x.view());
        let (gx, dgamma, dbeta) =
            batchnorm_train_grad(&x.view(), &gy.view(), &m, &v, &gamma, eps);
        let fgx = fd_grad(&f, &x, 1e-6);
        assert_close(gx.as_slice().unwrap(), fgx.as_slice().unwrap(), 1e-5);
        let fg = fd_grad(
            &|gg: &Array1<f64>| {
                let y = batchnorm_apply(&x.view(), &m, &v, gg, &beta, eps);
                (&y * &gy).sum()
            },
            &gamma,
            1e-6,
        );
        assert_close(dgamma.as_slice().unwrap(), fg.as_slice().unwrap(), 1e-6);
        let fb = fd_grad(
            &|bb: &Array1<f64>| {
                let y = batchnorm_apply(&x.view(), &m, &v, &gamma, bb, eps);
                (&y * &gy).sum()
            },
            &beta,
            1e-6,
        );
        assert_close(dbeta.as_slice().unwrap(), fb.as_slice().unwrap(), 1e-6);
    }

    #[test]
    fn upsample_and_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn4(&mut rng, (1, 2, 3, 3));
        let y = upsample_nearest2(&x.view());
        assert_eq!(y.dim(), (1, 2, 6, 6));
        assert_eq!(y[(0, 1, 5, 5)], x[(0, 1, 2, 2)]);
        // adjoint identity: <up(x), g> == <x, up_grad(g)>
        let g = randn4(&mut rng, (1, 2, 6, 6));
        let lhs = (&y * &g).sum();
        let rhs = (&x * &upsample_nearest2_grad(&g.view())).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn roi_align_constant_map_gives_constant_crop() {
        let feat = Array4::<f64>::from_elem((1, 3, 8, 8), 2.5);
        let rois = [RoiRef {
            batch: 0,
            ymin: 0.0,
            xmin: 0.0,
            ymax: 8.0,
            xmax: 8.0,
        }];
        let y = roi_align(&feat.view(), &rois, 7);
        for v in y.iter() {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn roi_align_single_cell_matches_hand_bilinear() {
        // 4x4 map with distinct values; ROI covering exactly cell (1,1).
        let feat = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, i, j)| (i * 4 + j) as f64);
        let rois = [RoiRef {
            batch: 0,
            ymin: 1.0,
            xmin: 1.0,
            ymax: 2.0,
            xmax: 2.0,
        }];
        let y = roi_align(&feat.view(), &rois, 1);
        // sample point at (1.5, 1.5) - 0.5 = (1.0, 1.0) exactly on pixel (1,1)
        assert!((y[(0, 0, 0, 0)] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn roi_align_grad_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let feat = randn4(&mut rng, (2, 3, 6, 6));
        let rois = [
            RoiRef { batch: 0, ymin: 0.7, xmin: 1.1, ymax: 4.2, xmax: 5.0 },
            RoiRef { batch: 1, ymin: 2.0, xmin: 0.0, ymax: 6.0, xmax: 3.5 },
        ];
        let y = roi_align(&feat.view(), &rois, 3);
        let g = randn4(&mut rng, (2, 3, 3, 3));
        let lhs = (&y * &g).sum();
        let gx = roi_align_grad(&g.view(), &rois, feat.dim());
        let rhs = (&feat * &gx).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn linear_shapes_and_bias() {
        let x = Array2::from_shape_fn((2, 3), |(i, j)| (i + j) as f64);
        let w = Array2::from_shape_fn((4, 3), |(i, j)| (i * 3 + j) as f64 * 0.1);
        let b = arr1(&[1.0, 2.0, 3.0, 4.0]);
        let y = linear(&x, &w, Some(&b));
        assert_eq!(y.dim(), (2, 4));
        let expect = x.row(0).dot(&w.row(1)) + 2.0;
        assert!((y[(0, 1)] - expect).abs() < 1e-12);
    }
}
