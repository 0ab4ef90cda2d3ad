//! Shared test support: independent f64 reference implementations of
//! every layer (naive nested loops, no code shared with the library's
//! compute path) and the central-finite-difference gradient checker
//! built on them.

#![allow(dead_code)]

use provnet::rng::RngStream;
use provnet::tensor::Tensor;

pub const FD_H: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-3;

// ------------------------------------------------------- f64 references

/// Naive six-nested-loop cross-correlation.
pub fn conv2d_ref(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    (co, _ci, k, _k2): (usize, usize, usize, usize),
    b: &[f64],
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * co * oh * ow];
    for ni in 0..n {
        for oc in 0..co {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = b[oc];
                    for ci in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let ii = (oi * stride + ki) as isize - pad as isize;
                                let jj = (oj * stride + kj) as isize - pad as isize;
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                    acc += x[((ni * c + ci) * h + ii as usize) * w + jj as usize]
                                        * wt[((oc * c + ci) * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                    out[((ni * co + oc) * oh + oi) * ow + oj] = acc;
                }
            }
        }
    }
    out
}

/// Transposed convolution by direct scatter; weight layout [Cin,Cout,k,k].
#[allow(clippy::too_many_arguments)]
pub fn tconv2d_ref(
    x: &[f64],
    (n, cin, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    output_padding: usize,
) -> Vec<f64> {
    let oh = (h - 1) * stride + k + output_padding - 2 * pad;
    let ow = (w - 1) * stride + k + output_padding - 2 * pad;
    let mut out = vec![0.0; n * cout * oh * ow];
    for ni in 0..n {
        for ci in 0..cin {
            for ii in 0..h {
                for jj in 0..w {
                    let v = x[((ni * cin + ci) * h + ii) * w + jj];
                    for oc in 0..cout {
                        for ki in 0..k {
                            for kj in 0..k {
                                let oi = (ii * stride + ki) as isize - pad as isize;
                                let oj = (jj * stride + kj) as isize - pad as isize;
                                if oi >= 0 && oj >= 0 && (oi as usize) < oh && (oj as usize) < ow {
                                    out[((ni * cout + oc) * oh + oi as usize) * ow + oj as usize] +=
                                        v * wt[((ci * cout + oc) * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Train-mode batchnorm over an [N,C,S] view.
pub fn batchnorm_ref(
    x: &[f64],
    (n, c, s): (usize, usize, usize),
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let m = (n * s) as f64;
    for ci in 0..c {
        let mut mean = 0.0;
        for ni in 0..n {
            for si in 0..s {
                mean += x[(ni * c + ci) * s + si];
            }
        }
        mean /= m;
        let mut var = 0.0;
        for ni in 0..n {
            for si in 0..s {
                var += (x[(ni * c + ci) * s + si] - mean).powi(2);
            }
        }
        var /= m;
        let istd = 1.0 / (var + eps).sqrt();
        for ni in 0..n {
            for si in 0..s {
                let at = (ni * c + ci) * s + si;
                out[at] = gamma[ci] * (x[at] - mean) * istd + beta[ci];
            }
        }
    }
    out
}

pub fn linear_ref(x: &[f64], (n, d): (usize, usize), w: &[f64], m: usize, b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = b[j];
            for p in 0..d {
                acc += x[i * d + p] * w[p * m + j];
            }
            out[i * m + j] = acc;
        }
    }
    out
}

pub fn maxpool2_ref(x: &[f64], (n, c, h, w): (usize, usize, usize, usize)) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * c * oh * ow];
    for ni in 0..n {
        for ci in 0..c {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    for di in 0..2 {
                        for dj in 0..2 {
                            best = best
                                .max(x[((ni * c + ci) * h + oi * 2 + di) * w + oj * 2 + dj]);
                        }
                    }
                    out[((ni * c + ci) * oh + oi) * ow + oj] = best;
                }
            }
        }
    }
    out
}

pub fn adaptive_pool_ref(
    x: &[f64],
    (n, c, h, w): (usize, usize, usize, usize),
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let mut out = vec![0.0; n * c * oh * ow];
    for ni in 0..n {
        for ci in 0..c {
            for oi in 0..oh {
                let (i0, i1) = (oi * h / oh, ((oi + 1) * h + oh - 1) / oh);
                for oj in 0..ow {
                    let (j0, j1) = (oj * w / ow, ((oj + 1) * w + ow - 1) / ow);
                    let mut acc = 0.0;
                    for i in i0..i1 {
                        for j in j0..j1 {
                            acc += x[((ni * c + ci) * h + i) * w + j];
                        }
                    }
                    out[((ni * c + ci) * oh + oi) * ow + oj] =
                        acc / ((i1 - i0) * (j1 - j0)) as f64;
                }
            }
        }
    }
    out
}

pub fn relu_ref(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn sigmoid_ref(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect()
}

/// Label-smoothed masked cross entropy; masked positions contribute
/// neither mass nor loss.
pub fn softmax_xent_ref(
    logits: &[f64],
    (n, k): (usize, usize),
    targets: &[usize],
    eps: f64,
    mask: Option<&[bool]>,
) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        let valid = |j: usize| mask.map_or(true, |m| m[i * k + j]);
        let mut mx = f64::NEG_INFINITY;
        for j in 0..k {
            if valid(j) {
                mx = mx.max(logits[i * k + j]);
            }
        }
        let mut z = 0.0;
        for j in 0..k {
            if valid(j) {
                z += (logits[i * k + j] - mx).exp();
            }
        }
        let lnz = z.ln() + mx;
        let mut row = 0.0;
        for j in 0..k {
            if !valid(j) {
                continue;
            }
            let q = eps / k as f64 + if j == targets[i] { 1.0 - eps } else { 0.0 };
            row -= q * (logits[i * k + j] - lnz);
        }
        total += row;
    }
    total / n as f64
}

pub fn bce_ref(xhat: &[f64], x: &[f64], n: usize) -> f64 {
    let clamp = 1e-7;
    let mut total = 0.0;
    for i in 0..xhat.len() {
        let p = xhat[i].clamp(clamp, 1.0 - clamp);
        total -= x[i] * p.ln() + (1.0 - x[i]) * (1.0 - p).ln();
    }
    total / n as f64
}

pub fn kl_ref(mu: &[f64], logvar: &[f64], n: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..mu.len() {
        total += -0.5 * (1.0 + logvar[i] - mu[i] * mu[i] - logvar[i].exp());
    }
    total / n as f64
}

// --------------------------------------------------------- FD machinery

/// Central finite differences of `f` (an f64 reference forward) against
/// an analytic gradient. `skip` marks elements excluded from the
/// comparison (kink neighborhoods). Returns the max relative error,
/// with the denominator floored at 1% of the tensor's gradient scale so
/// zero-crossing entries are judged by a matching absolute tolerance
/// rather than an undefined pure ratio.
pub fn fd_check(
    x: &[f32],
    analytic: &[f32],
    skip: impl Fn(usize) -> bool,
    f: impl Fn(&[f64]) -> f64,
) -> f64 {
    let mut xd: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let scale = analytic
        .iter()
        .fold(0.0f64, |m, &v| m.max((v as f64).abs()));
    let floor = (1e-2 * scale).max(1e-4);
    let mut max_rel = 0.0f64;
    for i in 0..x.len() {
        if skip(i) {
            continue;
        }
        let keep = xd[i];
        xd[i] = keep + FD_H;
        let fp = f(&xd);
        xd[i] = keep - FD_H;
        let fm = f(&xd);
        xd[i] = keep;
        let fd = (fp - fm) / (2.0 * FD_H);
        let a = analytic[i] as f64;
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    max_rel
}

/// Scalar loss ⟨G, y⟩ used to drive every FD check.
pub fn weighted_sum(y: &[f64], g: &[f32]) -> f64 {
    y.iter().zip(g.iter()).map(|(&a, &b)| a * b as f64).sum()
}

pub fn rand_vec(rng: &mut RngStream, n: usize, std: f32) -> Vec<f32> {
    let mut v = vec![0.0f32; n];
    rng.fill_normal(&mut v, 0.0, std);
    v
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub fn tensor4(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Tensor {
    Tensor::from_vec(&[n, c, h, w], data)
}

// ------------------------------------------------- scalar AdamW oracle

/// Reference AdamW in f64 for a single scalar parameter.
pub struct ScalarAdamW {
    pub m: f64,
    pub v: f64,
    pub t: u32,
    pub lr: f64,
    pub wd: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
}

impl ScalarAdamW {
    pub fn new(lr: f64, wd: f64) -> Self {
        Self {
            m: 0.0,
            v: 0.0,
            t: 0,
            lr,
            wd,
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&mut self, theta: f64, g: f64) -> f64 {
        self.t += 1;
        self.m = self.b1 * self.m + (1.0 - self.b1) * g;
        self.v = self.b2 * self.v + (1.0 - self.b2) * g * g;
        let mhat = self.m / (1.0 - self.b1.powi(self.t as i32));
        let vhat = self.v / (1.0 - self.b2.powi(self.t as i32));
        theta - self.lr * (mhat / (vhat.sqrt() + self.eps) + self.wd * theta)
    }
}
