//! Forward/backward primitives for every layer the three architectures
//! need. Convolutions run as per-image im2col + GEMM, parallelized over
//! the batch; each output element keeps a fixed accumulation order so
//! results are bitwise stable.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// floor((dim + 2·pad − k) / stride) + 1
pub fn conv_out_dim(dim: usize, k: usize, stride: usize, pad: usize) -> usize {
    (dim + 2 * pad - k) / stride + 1
}

fn im2col_image(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    cols: &mut [f32],
) {
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let p = oh * ow;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k * k + ki * k + kj) * p;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    let base = row + oi * ow;
                    if ii < 0 || ii >= h as isize {
                        cols[base..base + ow].fill(0.0);
                        continue;
                    }
                    let xrow = &x[ci * h * w + ii as usize * w..ci * h * w + (ii as usize + 1) * w];
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        cols[base + oj] = if jj < 0 || jj >= w as isize {
                            0.0
                        } else {
                            xrow[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_image(
    gcols: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    gx: &mut [f32],
) {
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(w, k, stride, pad);
    let p = oh * ow;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k * k + ki * k + kj) * p;
                for oi in 0..oh {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let base = row + oi * ow;
                    let grow = &mut gx[ci * h * w + ii as usize * w..ci * h * w + (ii as usize + 1) * w];
                    for oj in 0..ow {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj >= 0 && (jj as usize) < w {
                            grow[jj as usize] += gcols[base + oj];
                        }
                    }
                }
            }
        }
    }
}

/// y[n,co,:] = Σ_ck w[co,ck] · cols[n,ck,:], the shared GEMM core.
fn conv_gemm(
    cols: &[f32],
    _n: usize,
    ck: usize,
    p: usize,
    w: &[f32],
    cout: usize,
    bias: Option<&[f32]>,
    out: &mut [f32],
) {
    out.par_chunks_mut(cout * p)
        .enumerate()
        .for_each(|(ni, ochunk)| {
            let ccols = &cols[ni * ck * p..(ni + 1) * ck * p];
            for co in 0..cout {
                let orow = &mut ochunk[co * p..(co + 1) * p];
                orow.fill(bias.map_or(0.0, |b| b[co]));
                let wrow = &w[co * ck..(co + 1) * ck];
                for (cki, &wv) in wrow.iter().enumerate() {
                    if wv != 0.0 {
                        let crow = &ccols[cki * p..(cki + 1) * p];
                        for (o, &cv) in orow.iter_mut().zip(crow.iter()) {
                            *o += wv * cv;
                        }
                    }
                }
            }
        });
}

pub struct ConvCache {
    /// im2col buffer, [N, C·k·k, OH·OW] flattened.
    cols: Vec<f32>,
    in_shape: [usize; 4],
    k: usize,
    stride: usize,
    pad: usize,
}

/// Cross-correlation (no kernel flip). x: [N,Cin,H,W], w: [Cout,Cin,k,k].
pub fn conv2d_fwd(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, ConvCache)> {
    let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (cout, cin, k, k2) = (w.dim(0), w.dim(1), w.dim(2), w.dim(3));
    if cin != c || k != k2 {
        return Err(Error::Dim(format!(
            "conv2d weight {:?} does not accept input {:?}",
            w.shape(),
            x.shape()
        )));
    }
    if k > h + 2 * pad || k > wd + 2 * pad || stride == 0 {
        return Err(Error::Dim(format!(
            "conv2d kernel {k} exceeds padded input {h}x{wd} (pad {pad}) or stride 0"
        )));
    }
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(wd, k, stride, pad);
    let (ckk, p) = (c * k * k, oh * ow);

    let mut cols = vec![0.0f32; n * ckk * p];
    cols.par_chunks_mut(ckk * p).enumerate().for_each(|(ni, cc)| {
        im2col_image(&x.data()[ni * c * h * wd..], c, h, wd, k, stride, pad, cc);
    });

    let mut out = vec![0.0f32; n * cout * p];
    conv_gemm(&cols, n, ckk, p, w.data(), cout, Some(b.data()), &mut out);
    Ok((
        Tensor::from_vec(&[n, cout, oh, ow], out),
        ConvCache {
            cols,
            in_shape: [n, c, h, wd],
            k,
            stride,
            pad,
        },
    ))
}

/// Gradients w.r.t. input, weight, and bias.
pub fn conv2d_bwd(cache: &ConvCache, w: &Tensor, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let [n, c, h, wd] = cache.in_shape;
    let (k, stride, pad) = (cache.k, cache.stride, cache.pad);
    let cout = w.dim(0);
    let ckk = c * k * k;
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(wd, k, stride, pad);
    let p = oh * ow;

    // bias grad
    let mut gb = vec![0.0f32; cout];
    for ni in 0..n {
        for co in 0..cout {
            let row = &gy.data()[(ni * cout + co) * p..(ni * cout + co + 1) * p];
            gb[co] += row.iter().sum::<f32>();
        }
    }

    // weight grad: gw[co,ck] = Σ_n <gy[n,co,:], cols[n,ck,:]>
    let mut gw = vec![0.0f32; cout * ckk];
    gw.par_chunks_mut(ckk).enumerate().for_each(|(co, gwrow)| {
        for ni in 0..n {
            let gyrow = &gy.data()[(ni * cout + co) * p..(ni * cout + co + 1) * p];
            let ccols = &cache.cols[ni * ckk * p..(ni + 1) * ckk * p];
            for (cki, acc) in gwrow.iter_mut().enumerate() {
                let crow = &ccols[cki * p..(cki + 1) * p];
                let mut s = 0.0f32;
                for (&g, &cv) in gyrow.iter().zip(crow.iter()) {
                    s += g * cv;
                }
                *acc += s;
            }
        }
    });

    // input grad: gcols = wᵀ·gy, then col2im
    let mut gx = vec![0.0f32; n * c * h * wd];
    gx.par_chunks_mut(c * h * wd).enumerate().for_each(|(ni, gxi)| {
        let mut gcols = vec![0.0f32; ckk * p];
        for co in 0..cout {
            let gyrow = &gy.data()[(ni * cout + co) * p..(ni * cout + co + 1) * p];
            let wrow = &w.data()[co * ckk..(co + 1) * ckk];
            for (cki, &wv) in wrow.iter().enumerate() {
                if wv != 0.0 {
                    let grow = &mut gcols[cki * p..(cki + 1) * p];
                    for (g, &gyv) in grow.iter_mut().zip(gyrow.iter()) {
                        *g += wv * gyv;
                    }
                }
            }
        }
        col2im_image(&gcols, c, h, wd, k, stride, pad, gxi);
    });

    (
        Tensor::from_vec(&[n, c, h, wd], gx),
        Tensor::from_vec(w.shape(), gw),
        Tensor::from_vec(&[cout], gb),
    )
}

/// Raw backward-input pass used by both conv2d_bwd and the transposed
/// convolution forward. `gy`: [N,Cout,OH,OW] under weight [Cout,Cin,k,k];
/// returns the [N,Cin,H,W] adjoint for the given input dims.
fn conv_bwd_input_raw(
    gy: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    h: usize,
    wd: usize,
) -> Tensor {
    let (n, cout) = (gy.dim(0), gy.dim(1));
    let (oh, ow) = (gy.dim(2), gy.dim(3));
    let (cin, k) = (w.dim(1), w.dim(2));
    let ckk = cin * k * k;
    let p = oh * ow;
    let mut gx = vec![0.0f32; n * cin * h * wd];
    gx.par_chunks_mut(cin * h * wd).enumerate().for_each(|(ni, gxi)| {
        let mut gcols = vec![0.0f32; ckk * p];
        for co in 0..cout {
            let gyrow = &gy.data()[(ni * cout + co) * p..(ni * cout + co + 1) * p];
            let wrow = &w.data()[co * ckk..(co + 1) * ckk];
            for (cki, &wv) in wrow.iter().enumerate() {
                if wv != 0.0 {
                    let grow = &mut gcols[cki * p..(cki + 1) * p];
                    for (g, &gyv) in grow.iter_mut().zip(gyrow.iter()) {
                        *g += wv * gyv;
                    }
                }
            }
        }
        col2im_image(&gcols, cin, h, wd, k, stride, pad, gxi);
    });
    Tensor::from_vec(&[n, cin, h, wd], gx)
}

/// Weight-grad core shared with the transposed convolution backward.
fn conv_bwd_weight_raw(gy: &Tensor, x: &Tensor, k: usize, stride: usize, pad: usize) -> Tensor {
    let (n, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let cout = gy.dim(1);
    let oh = conv_out_dim(h, k, stride, pad);
    let ow = conv_out_dim(wd, k, stride, pad);
    debug_assert_eq!(oh, gy.dim(2));
    debug_assert_eq!(ow, gy.dim(3));
    let (ckk, p) = (c * k * k, oh * ow);
    let mut cols = vec![0.0f32; n * ckk * p];
    cols.par_chunks_mut(ckk * p).enumerate().for_each(|(ni, cc)| {
        im2col_image(&x.data()[ni * c * h * wd..], c, h, wd, k, stride, pad, cc);
    });
    let mut gw = vec![0.0f32; cout * ckk];
    gw.par_chunks_mut(ckk).enumerate().for_each(|(co, gwrow)| {
        for ni in 0..n {
            let gyrow = &gy.data()[(ni * cout + co) * p..(ni * cout + co + 1) * p];
            let ccols = &cols[ni * ckk * p..(ni + 1) * ckk * p];
            for (cki, acc) in gwrow.iter_mut().enumerate() {
                let crow = &ccols[cki * p..(cki + 1) * p];
                let mut s = 0.0f32;
                for (&g, &cv) in gyrow.iter().zip(crow.iter()) {
                    s += g * cv;
                }
                *acc += s;
            }
        }
    });
    Tensor::from_vec(&[cout, c, k, k], gw)
}

pub struct TconvCache {
    in_shape: [usize; 4],
    out_hw: (usize, usize),
    stride: usize,
    pad: usize,
}

/// Transposed convolution, the adjoint of conv2d. x: [N,Cin,H,W],
/// w: [Cin,Cout,k,k] (conv-style weight with roles swapped).
/// H' = (H−1)·stride − 2·pad + k + output_padding.
pub fn transposed_conv2d_fwd(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
    output_padding: usize,
) -> Result<(Tensor, TconvCache)> {
    let (n, cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    if w.dim(0) != cin {
        return Err(Error::Dim(format!(
            "transposed_conv2d weight {:?} does not accept input {:?}",
            w.shape(),
            x.shape()
        )));
    }
    let (cout, k) = (w.dim(1), w.dim(2));
    if output_padding >= stride {
        return Err(Error::Dim(format!(
            "output_padding {output_padding} must be < stride {stride}"
        )));
    }
    let oh = (h - 1) * stride + k + output_padding;
    let ow = (wd - 1) * stride + k + output_padding;
    if oh < 2 * pad || ow < 2 * pad {
        return Err(Error::Dim("transposed_conv2d: negative output dims".into()));
    }
    let (oh, ow) = (oh - 2 * pad, ow - 2 * pad);
    // Consistency: a conv with these params over [oh,ow] must return [h,w].
    if conv_out_dim(oh, k, stride, pad) != h || conv_out_dim(ow, k, stride, pad) != wd {
        return Err(Error::Dim(
            "transposed_conv2d: output_padding inconsistent with shape formula".into(),
        ));
    }
    let mut y = conv_bwd_input_raw(x, w, stride, pad, oh, ow);
    // add bias per output channel
    let p = oh * ow;
    for ni in 0..n {
        for co in 0..cout {
            let row = &mut y.data_mut()[(ni * cout + co) * p..(ni * cout + co + 1) * p];
            let bv = b.data()[co];
            for v in row {
                *v += bv;
            }
        }
    }
    Ok((
        y,
        TconvCache {
            in_shape: [n, cin, h, wd],
            out_hw: (oh, ow),
            stride,
            pad,
        },
    ))
}

pub fn transposed_conv2d_bwd(
    cache: &TconvCache,
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [n, _cin, _h, _wd] = cache.in_shape;
    let (cout, k) = (w.dim(1), w.dim(2));
    let (oh, ow) = cache.out_hw;
    let p = oh * ow;
    let mut gb = vec![0.0f32; cout];
    for ni in 0..n {
        for co in 0..cout {
            let row = &gy.data()[(ni * cout + co) * p..(ni * cout + co + 1) * p];
            gb[co] += row.iter().sum::<f32>();
        }
    }
    // gx = conv forward of gy with w (roles swapped back)
    let oh_check = conv_out_dim(oh, k, cache.stride, cache.pad);
    let ow_check = conv_out_dim(ow, k, cache.stride, cache.pad);
    debug_assert_eq!((oh_check, ow_check), (cache.in_shape[2], cache.in_shape[3]));
    let ckk = cout * k * k;
    let mut cols = vec![0.0f32; n * ckk * oh_check * ow_check];
    let pp = oh_check * ow_check;
    cols.par_chunks_mut(ckk * pp).enumerate().for_each(|(ni, cc)| {
        im2col_image(
            &gy.data()[ni * cout * oh * ow..],
            cout,
            oh,
            ow,
            k,
            cache.stride,
            cache.pad,
            cc,
        );
    });
    let cin = cache.in_shape[1];
    let mut gx = vec![0.0f32; n * cin * pp];
    conv_gemm(&cols, n, ckk, pp, w.data(), cin, None, &mut gx);

    // gw: conv weight-grad with roles (gy_role = tconv input x, x_role = gy)
    let gw = conv_bwd_weight_raw(x, gy, k, cache.stride, cache.pad);

    (
        Tensor::from_vec(&[n, cin, oh_check, ow_check], gx),
        gw,
        Tensor::from_vec(&[cout], gb),
    )
}

pub struct BnCache {
    xhat: Tensor,
    inv_std: Vec<f32>,
    spatial: usize,
    mode: Mode,
}

/// Batch normalization over an [N, C, S] view (S = 1 for 1-D features).
/// Train mode normalizes with batch statistics and updates the running
/// pair in place; eval mode applies the running statistics.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_fwd(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    run_mean: &mut Tensor,
    run_var: &mut Tensor,
    mode: Mode,
    eps: f32,
    momentum: f32,
    spatial: usize,
) -> (Tensor, BnCache) {
    let c = gamma.len();
    let total = x.len();
    let s = spatial;
    let n = total / (c * s);
    debug_assert_eq!(n * c * s, total, "batchnorm view mismatch");
    let m = (n * s) as f64;

    let mut y = vec![0.0f32; total];
    let mut xhat = vec![0.0f32; total];
    let mut inv_std = vec![0.0f32; c];

    let idx = |ni: usize, ci: usize| (ni * c + ci) * s;

    match mode {
        Mode::Train => {
            for ci in 0..c {
                let mut sum = 0.0f64;
                for ni in 0..n {
                    let row = &x.data()[idx(ni, ci)..idx(ni, ci) + s];
                    sum += row.iter().map(|&v| v as f64).sum::<f64>();
                }
                let mean = (sum / m) as f32;
                let mut var_acc = 0.0f64;
                for ni in 0..n {
                    let row = &x.data()[idx(ni, ci)..idx(ni, ci) + s];
                    var_acc += row.iter().map(|&v| ((v - mean) as f64).powi(2)).sum::<f64>();
                }
                let var = (var_acc / m) as f32;
                let istd = 1.0 / (var + eps).sqrt();
                inv_std[ci] = istd;
                let (g, bta) = (gamma.data()[ci], beta.data()[ci]);
                for ni in 0..n {
                    let base = idx(ni, ci);
                    for si in 0..s {
                        let xh = (x.data()[base + si] - mean) * istd;
                        xhat[base + si] = xh;
                        y[base + si] = g * xh + bta;
                    }
                }
                // unbiased variance for the running estimate
                let var_unbiased = if m > 1.0 {
                    (var_acc / (m - 1.0)) as f32
                } else {
                    var
                };
                run_mean.data_mut()[ci] = (1.0 - momentum) * run_mean.data()[ci] + momentum * mean;
                run_var.data_mut()[ci] =
                    (1.0 - momentum) * run_var.data()[ci] + momentum * var_unbiased;
            }
        }
        Mode::Eval => {
            for ci in 0..c {
                let mean = run_mean.data()[ci];
                let istd = 1.0 / (run_var.data()[ci] + eps).sqrt();
                inv_std[ci] = istd;
                let (g, bta) = (gamma.data()[ci], beta.data()[ci]);
                for ni in 0..n {
                    let base = idx(ni, ci);
                    for si in 0..s {
                        let xh = (x.data()[base + si] - mean) * istd;
                        xhat[base + si] = xh;
                        y[base + si] = g * xh + bta;
                    }
                }
            }
        }
    }

    (
        Tensor::from_vec(x.shape(), y),
        BnCache {
            xhat: Tensor::from_vec(x.shape(), xhat),
            inv_std,
            spatial: s,
            mode,
        },
    )
}

pub fn batchnorm_bwd(cache: &BnCache, gamma: &Tensor, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let c = gamma.len();
    let s = cache.spatial;
    let total = gy.len();
    let n = total / (c * s);
    let m = (n * s) as f32;
    let idx = |ni: usize, ci: usize| (ni * c + ci) * s;

    let mut gx = vec![0.0f32; total];
    let mut ggamma = vec![0.0f32; c];
    let mut gbeta = vec![0.0f32; c];

    for ci in 0..c {
        let mut sum_gy = 0.0f64;
        let mut sum_gy_xhat = 0.0f64;
        for ni in 0..n {
            let base = idx(ni, ci);
            for si in 0..s {
                let g = gy.data()[base + si] as f64;
                sum_gy += g;
                sum_gy_xhat += g * cache.xhat.data()[base + si] as f64;
            }
        }
        ggamma[ci] = sum_gy_xhat as f32;
        gbeta[ci] = sum_gy as f32;
        let gsc = gamma.data()[ci] * cache.inv_std[ci];
        match cache.mode {
            Mode::Train => {
                let mean_gy = (sum_gy / m as f64) as f32;
                let mean_gy_xhat = (sum_gy_xhat / m as f64) as f32;
                for ni in 0..n {
                    let base = idx(ni, ci);
                    for si in 0..s {
                        let xh = cache.xhat.data()[base + si];
                        gx[base + si] =
                            gsc * (gy.data()[base + si] - mean_gy - xh * mean_gy_xhat);
                    }
                }
            }
            Mode::Eval => {
                for ni in 0..n {
                    let base = idx(ni, ci);
                    for si in 0..s {
                        gx[base + si] = gsc * gy.data()[base + si];
                    }
                }
            }
        }
    }

    (
        Tensor::from_vec(gy.shape(), gx),
        Tensor::from_vec(&[c], ggamma),
        Tensor::from_vec(&[c], gbeta),
    )
}

pub fn relu_fwd(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Subgradient 0 at the kink.
pub fn relu_bwd(x: &Tensor, gy: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(gy.data().iter())
        .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(gy.shape(), data)
}

pub fn sigmoid_fwd(x: &Tensor) -> Tensor {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Takes the forward output y = σ(x).
pub fn sigmoid_bwd(y: &Tensor, gy: &Tensor) -> Tensor {
    let data = y
        .data()
        .iter()
        .zip(gy.data().iter())
        .map(|(&yv, &g)| g * yv * (1.0 - yv))
        .collect();
    Tensor::from_vec(gy.shape(), data)
}

pub struct MaxPoolCache {
    argmax: Vec<u32>,
    in_shape: [usize; 4],
}

/// 2×2 max pooling, stride 2, floor semantics. Ties route the gradient
/// to the first (row-major) argmax.
pub fn maxpool2d_fwd(x: &Tensor) -> (Tensor, MaxPoolCache) {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; n * c * oh * ow];
    let mut argmax = vec![0u32; n * c * oh * ow];
    for ni in 0..n {
        for ci in 0..c {
            let xoff = (ni * c + ci) * h * w;
            let ooff = (ni * c + ci) * oh * ow;
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_at = 0usize;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let at = (oi * 2 + di) * w + oj * 2 + dj;
                            let v = x.data()[xoff + at];
                            if v > best {
                                best = v;
                                best_at = at;
                            }
                        }
                    }
                    out[ooff + oi * ow + oj] = best;
                    argmax[ooff + oi * ow + oj] = best_at as u32;
                }
            }
        }
    }
    (
        Tensor::from_vec(&[n, c, oh, ow], out),
        MaxPoolCache {
            argmax,
            in_shape: [n, c, h, w],
        },
    )
}

pub fn maxpool2d_bwd(cache: &MaxPoolCache, gy: &Tensor) -> Tensor {
    let [n, c, h, w] = cache.in_shape;
    let (oh, ow) = (h / 2, w / 2);
    let mut gx = vec![0.0f32; n * c * h * w];
    for ni in 0..n {
        for ci in 0..c {
            let xoff = (ni * c + ci) * h * w;
            let ooff = (ni * c + ci) * oh * ow;
            for oi in 0..oh * ow {
                gx[xoff + cache.argmax[ooff + oi] as usize] += gy.data()[ooff + oi];
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], gx)
}

pub struct AvgPoolCache {
    in_shape: [usize; 4],
    out_hw: (usize, usize),
}

/// Adaptive average pooling: axis i maps to the bin
/// [floor(i·H/out), ceil((i+1)·H/out)).
pub fn adaptive_avgpool2d_fwd(x: &Tensor, out_h: usize, out_w: usize) -> (Tensor, AvgPoolCache) {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    assert!(h >= out_h && w >= out_w, "adaptive pool upsampling not supported");
    let mut out = vec![0.0f32; n * c * out_h * out_w];
    for ni in 0..n {
        for ci in 0..c {
            let xoff = (ni * c + ci) * h * w;
            let ooff = (ni * c + ci) * out_h * out_w;
            for oi in 0..out_h {
                let (i0, i1) = (oi * h / out_h, ((oi + 1) * h + out_h - 1) / out_h);
                for oj in 0..out_w {
                    let (j0, j1) = (oj * w / out_w, ((oj + 1) * w + out_w - 1) / out_w);
                    let mut acc = 0.0f32;
                    for i in i0..i1 {
                        for j in j0..j1 {
                            acc += x.data()[xoff + i * w + j];
                        }
                    }
                    out[ooff + oi * out_w + oj] = acc / ((i1 - i0) * (j1 - j0)) as f32;
                }
            }
        }
    }
    (
        Tensor::from_vec(&[n, c, out_h, out_w], out),
        AvgPoolCache {
            in_shape: [n, c, h, w],
            out_hw: (out_h, out_w),
        },
    )
}

pub fn adaptive_avgpool2d_bwd(cache: &AvgPoolCache, gy: &Tensor) -> Tensor {
    let [n, c, h, w] = cache.in_shape;
    let (out_h, out_w) = cache.out_hw;
    let mut gx = vec![0.0f32; n * c * h * w];
    for ni in 0..n {
        for ci in 0..c {
            let xoff = (ni * c + ci) * h * w;
            let ooff = (ni * c + ci) * out_h * out_w;
            for oi in 0..out_h {
                let (i0, i1) = (oi * h / out_h, ((oi + 1) * h + out_h - 1) / out_h);
                for oj in 0..out_w {
                    let (j0, j1) = (oj * w / out_w, ((oj + 1) * w + out_w - 1) / out_w);
                    let g = gy.data()[ooff + oi * out_w + oj] / ((i1 - i0) * (j1 - j0)) as f32;
                    for i in i0..i1 {
                        for j in j0..j1 {
                            gx[xoff + i * w + j] += g;
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[n, c, h, w], gx)
}

/// Global average pooling [N,C,H,W] → [N,C].
pub fn global_avgpool_fwd(x: &Tensor) -> (Tensor, AvgPoolCache) {
    let (y, cache) = adaptive_avgpool2d_fwd(x, 1, 1);
    let (n, c) = (x.dim(0), x.dim(1));
    (y.reshape(&[n, c]).unwrap(), cache)
}

pub fn global_avgpool_bwd(cache: &AvgPoolCache, gy: &Tensor) -> Tensor {
    let [n, c, _, _] = cache.in_shape;
    let gy4 = gy.clone().reshape(&[n, c, 1, 1]).unwrap();
    adaptive_avgpool2d_bwd(cache, &gy4)
}

pub struct DropoutCache {
    /// Per-element multiplier (0 or 1/(1−p)); `None` means identity.
    factors: Option<Vec<f32>>,
}

/// Inverted dropout. Train: zero with probability p, scale survivors by
/// 1/(1−p). Eval or p = 0: identity.
pub fn dropout_fwd(
    x: &Tensor,
    p: f32,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<(Tensor, DropoutCache)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Param(format!("dropout p must be in [0,1), got {p}")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok((x.clone(), DropoutCache { factors: None }));
    }
    let scale = 1.0 / (1.0 - p);
    let mut factors = vec![0.0f32; x.len()];
    let mut y = vec![0.0f32; x.len()];
    for i in 0..x.len() {
        let f = if rng.next_f32() < p { 0.0 } else { scale };
        factors[i] = f;
        y[i] = x.data()[i] * f;
    }
    Ok((
        Tensor::from_vec(x.shape(), y),
        DropoutCache {
            factors: Some(factors),
        },
    ))
}

pub fn dropout_bwd(cache: &DropoutCache, gy: &Tensor) -> Tensor {
    match &cache.factors {
        None => gy.clone(),
        Some(f) => {
            let data = gy
                .data()
                .iter()
                .zip(f.iter())
                .map(|(&g, &m)| g * m)
                .collect();
            Tensor::from_vec(gy.shape(), data)
        }
    }
}

/// y = x·W + b with x: [N,D], W: [D,M], b: [M].
pub fn linear_fwd(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.dim(1) != w.dim(0) {
        return Err(Error::Dim(format!(
            "linear: input {:?} vs weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let mut y = crate::tensor::matmul(x, w);
    let (n, m) = (y.dim(0), y.dim(1));
    for i in 0..n {
        let row = &mut y.data_mut()[i * m..(i + 1) * m];
        for (v, &bv) in row.iter_mut().zip(b.data().iter()) {
            *v += bv;
        }
    }
    Ok(y)
}

pub fn linear_bwd(x: &Tensor, w: &Tensor, gy: &Tensor) -> (Tensor, Tensor, Tensor) {
    let gw = crate::tensor::matmul_at(x, gy);
    let gx = crate::tensor::matmul_bt(gy, w);
    let (n, m) = (gy.dim(0), gy.dim(1));
    let mut gb = vec![0.0f32; m];
    for i in 0..n {
        let row = &gy.data()[i * m..(i + 1) * m];
        for (acc, &g) in gb.iter_mut().zip(row.iter()) {
            *acc += g;
        }
    }
    (gx, gw, Tensor::from_vec(&[m], gb))
}

/// Concatenate along columns: [N,A] ++ [N,B] → [N,A+B].
pub fn concat_cols(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, ca) = (a.dim(0), a.dim(1));
    let cb = b.dim(1);
    assert_eq!(n, b.dim(0));
    let mut out = vec![0.0f32; n * (ca + cb)];
    for i in 0..n {
        out[i * (ca + cb)..i * (ca + cb) + ca].copy_from_slice(a.row(i));
        out[i * (ca + cb) + ca..(i + 1) * (ca + cb)].copy_from_slice(b.row(i));
    }
    Tensor::from_vec(&[n, ca + cb], out)
}

/// Split a column-concatenated gradient back into its two parts.
pub fn split_cols(g: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let (n, c) = (g.dim(0), g.dim(1));
    let cb = c - ca;
    let mut ga = vec![0.0f32; n * ca];
    let mut gb = vec![0.0f32; n * cb];
    for i in 0..n {
        ga[i * ca..(i + 1) * ca].copy_from_slice(&g.row(i)[..ca]);
        gb[i * cb..(i + 1) * cb].copy_from_slice(&g.row(i)[ca..]);
    }
    (
        Tensor::from_vec(&[n, ca], ga),
        Tensor::from_vec(&[n, cb], gb),
    )
}
