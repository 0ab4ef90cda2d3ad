//! Losses: label-smoothed softmax cross-entropy with validity masking,
//! plus the VAE reconstruction and KL terms.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Effective −∞ for masked logits; exp(sentinel − max) underflows to an
/// exact 0 in f32 while keeping the softmax NaN-free.
pub const MASK_SENTINEL: f32 = -1e30;

const BCE_CLAMP: f32 = 1e-7;

/// Row-wise softmax with optional validity mask (false = invalid
/// position, forced to probability exactly 0). Numerically stable via
/// max subtraction.
pub fn softmax_probs(logits: &Tensor, mask: Option<&[bool]>) -> Tensor {
    let (n, k) = (logits.dim(0), logits.dim(1));
    if let Some(m) = mask {
        assert_eq!(m.len(), n * k, "mask shape mismatch");
    }
    let mut out = vec![0.0f32; n * k];
    for i in 0..n {
        let row = logits.row(i);
        let mrow = mask.map(|m| &m[i * k..(i + 1) * k]);
        let eff = |j: usize| -> f32 {
            match mrow {
                Some(m) if !m[j] => MASK_SENTINEL,
                _ => row[j],
            }
        };
        let mut mx = f32::NEG_INFINITY;
        for j in 0..k {
            mx = mx.max(eff(j));
        }
        let mut denom = 0.0f64;
        for j in 0..k {
            denom += ((eff(j) - mx) as f64).exp();
        }
        let orow = &mut out[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            *o = (((eff(j) - mx) as f64).exp() / denom) as f32;
        }
    }
    Tensor::from_vec(&[n, k], out)
}

/// Label-smoothed cross entropy. The smoothed target is
/// q_k = ε/K + (1−ε)·1[k = target]; loss is the batch mean of
/// −Σ_{k unmasked} q_k · ln p_k. Masked positions get logit −∞ before
/// the softmax and contribute neither loss nor gradient.
pub fn softmax_xent(
    logits: &Tensor,
    targets: &[usize],
    eps: f32,
    mask: Option<&[bool]>,
) -> Result<(f32, Tensor)> {
    let (n, k) = (logits.dim(0), logits.dim(1));
    if targets.len() != n {
        return Err(Error::Dim(format!(
            "xent: {} targets for batch {}",
            targets.len(),
            n
        )));
    }
    for (i, &t) in targets.iter().enumerate() {
        if t >= k {
            return Err(Error::Param(format!("xent: target {t} out of range [0,{k})")));
        }
        if let Some(m) = mask {
            if !m[i * k + t] {
                return Err(Error::Param(format!(
                    "xent: target {t} of row {i} is masked out"
                )));
            }
        }
    }

    let probs = softmax_probs(logits, mask);
    let mut loss = 0.0f64;
    let uniform = eps as f64 / k as f64;
    for i in 0..n {
        let prow = probs.row(i);
        let mrow = mask.map(|m| &m[i * k..(i + 1) * k]);
        let mut row_loss = 0.0f64;
        for (j, &p) in prow.iter().enumerate() {
            if let Some(m) = mrow {
                if !m[j] {
                    continue;
                }
            }
            let q = uniform + if j == targets[i] { (1.0 - eps) as f64 } else { 0.0 };
            if q > 0.0 {
                // ln p from the stable softmax; p > 0 on unmasked positions
                row_loss -= q * (p.max(f32::MIN_POSITIVE) as f64).ln();
            }
        }
        loss += row_loss;
    }
    Ok(((loss / n as f64) as f32, probs))
}

/// Gradient of [`softmax_xent`] w.r.t. the logits: (Q·p − q)/N on
/// unmasked positions (Q = the target mass remaining on valid slots),
/// exactly 0 on masked ones. Without a mask Q = 1 and this is the usual
/// (p − q)/N.
pub fn softmax_xent_grad(
    probs: &Tensor,
    targets: &[usize],
    eps: f32,
    mask: Option<&[bool]>,
) -> Tensor {
    let (n, k) = (probs.dim(0), probs.dim(1));
    let uniform = eps / k as f32;
    let scale = 1.0 / n as f32;
    let mut g = vec![0.0f32; n * k];
    for i in 0..n {
        let prow = probs.row(i);
        let grow = &mut g[i * k..(i + 1) * k];
        let mrow = mask.map(|m| &m[i * k..(i + 1) * k]);
        let q_at = |j: usize| uniform + if j == targets[i] { 1.0 - eps } else { 0.0 };
        let q_mass = match mrow {
            None => 1.0,
            Some(m) => (0..k).filter(|&j| m[j]).map(q_at).sum::<f32>(),
        };
        for j in 0..k {
            if let Some(m) = mrow {
                if !m[j] {
                    continue;
                }
            }
            grow[j] = (q_mass * prow[j] - q_at(j)) * scale;
        }
    }
    Tensor::from_vec(&[n, k], g)
}

/// Binary cross-entropy reconstruction loss, summed over pixels and
/// averaged over the batch. x̂ is clamped to [δ, 1−δ]; returns the loss
/// and its gradient w.r.t. x̂ (zero where the clamp is active).
pub fn bce_recon(xhat: &Tensor, x: &Tensor) -> (f32, Tensor) {
    assert_eq!(xhat.shape(), x.shape(), "bce shapes differ");
    let n = xhat.dim(0) as f64;
    let mut loss = 0.0f64;
    let mut grad = vec![0.0f32; xhat.len()];
    let inv_n = (1.0 / n) as f32;
    for i in 0..xhat.len() {
        let t = x.data()[i];
        let raw = xhat.data()[i];
        let p = raw.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        loss -= t as f64 * (p as f64).ln() + (1.0 - t) as f64 * (1.0 - p as f64).ln();
        if raw > BCE_CLAMP && raw < 1.0 - BCE_CLAMP {
            grad[i] = (-t / p + (1.0 - t) / (1.0 - p)) * inv_n;
        }
    }
    ((loss / n) as f32, Tensor::from_vec(xhat.shape(), grad))
}

/// KL(q‖N(0,I)) for a diagonal Gaussian: −½·Σ_d(1 + logσ² − μ² − σ²),
/// averaged over the batch. Returns (loss, ∂/∂μ, ∂/∂logσ²).
pub fn kl_gaussian(mu: &Tensor, logvar: &Tensor) -> (f32, Tensor, Tensor) {
    assert_eq!(mu.shape(), logvar.shape());
    let n = mu.dim(0) as f64;
    let mut loss = 0.0f64;
    let mut gmu = vec![0.0f32; mu.len()];
    let mut glv = vec![0.0f32; mu.len()];
    let inv_n = (1.0 / n) as f32;
    for i in 0..mu.len() {
        let m = mu.data()[i];
        let lv = logvar.data()[i];
        let var = lv.exp();
        loss += -0.5 * (1.0 + lv as f64 - (m as f64).powi(2) - var as f64);
        gmu[i] = m * inv_n;
        glv[i] = 0.5 * (var - 1.0) * inv_n;
    }
    (
        (loss / n) as f32,
        Tensor::from_vec(mu.shape(), gmu),
        Tensor::from_vec(mu.shape(), glv),
    )
}
