//! Differentiable numeric core: parameter store, layer ops, losses,
//! AdamW, and the warmup + step-decay learning-rate schedule.

pub mod layers;
pub mod loss;
pub mod ops;

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Handle into a [`ParamStore`].
pub type ParamId = usize;

/// A named value/gradient pair. Running statistics are stored as
/// non-trainable entries so they checkpoint alongside the weights.
#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Initialization recipe for a parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f32),
    /// Kaiming normal with fan-out mode: std = sqrt(2 / fan_out).
    KaimingFanOut(usize),
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<ParamTensor>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Insertion order fixes both the rng draw
    /// order and the checkpoint layout, so builders must be
    /// deterministic.
    pub fn add(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        trainable: bool,
        rng: &mut RngStream,
    ) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let mut value = Tensor::zeros(shape);
        match init {
            Init::Zeros => {}
            Init::Ones => value.fill(1.0),
            Init::Normal(std) => rng.fill_normal(value.data_mut(), 0.0, std),
            Init::KaimingFanOut(fan_out) => {
                let std = (2.0 / fan_out as f32).sqrt();
                rng.fill_normal(value.data_mut(), 0.0, std);
            }
        }
        let grad = Tensor::zeros(shape);
        let id = self.params.len();
        self.params.push(ParamTensor {
            name: name.to_string(),
            value,
            grad,
            trainable,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &ParamTensor {
        &self.params[id]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id].grad
    }

    /// Accumulate into a parameter's gradient.
    pub fn accum_grad(&mut self, id: ParamId, g: &Tensor) {
        self.params[id].grad.add_assign(g);
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.params.iter()
    }

    /// Total number of scalar parameters (trainable only).
    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            weight_decay: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moments plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub cfg: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub t: u64,
    /// Per-parameter learning-rate multiplier (per-branch ratios).
    lr_mult: Vec<f32>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let m = store
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        let v = store
            .iter()
            .map(|p| Tensor::zeros(p.value.shape()))
            .collect();
        Self {
            cfg,
            m,
            v,
            t: 0,
            lr_mult: vec![1.0; store.len()],
        }
    }

    pub fn set_lr_mult(&mut self, id: ParamId, mult: f32) {
        self.lr_mult[id] = mult;
    }
}

/// One decoupled-weight-decay Adam step over every trainable parameter.
/// Gradients are left untouched; the caller zeroes them.
pub fn adamw_step(store: &mut ParamStore, state: &mut OptimizerState) {
    state.t += 1;
    let t = state.t as f64;
    let b1 = state.cfg.beta1 as f64;
    let b2 = state.cfg.beta2 as f64;
    let bc1 = (1.0 - b1.powi(state.t as i32)) as f32;
    let bc2 = (1.0 - b2.powi(state.t as i32)) as f32;
    let _ = t;
    for (id, p) in store.params.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let lr = state.cfg.lr * state.lr_mult[id];
        let wd = state.cfg.weight_decay;
        let (b1, b2, eps) = (state.cfg.beta1, state.cfg.beta2, state.cfg.eps);
        let m = state.m[id].data_mut();
        let v = state.v[id].data_mut();
        let g = p.grad.data();
        let th = p.value.data_mut();
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            th[i] -= lr * (mhat / (vhat.sqrt() + eps) + wd * th[i]);
        }
    }
}

/// Warmup then step decay. During warmup the rate climbs linearly to
/// `base_lr`; afterwards the decay exponent counts epochs elapsed since
/// warmup ended.
pub fn lr_at_epoch(
    epoch: usize,
    base_lr: f32,
    warmup_epochs: usize,
    decay_step: usize,
    gamma: f32,
) -> f32 {
    if epoch < warmup_epochs {
        base_lr * (epoch + 1) as f32 / warmup_epochs as f32
    } else if decay_step == 0 {
        base_lr
    } else {
        let k = (epoch - warmup_epochs) / decay_step;
        base_lr * gamma.powi(k as i32)
    }
}

/// Check every parameter holds only finite values.
pub fn check_store_finite(store: &ParamStore) -> Result<()> {
    for p in store.iter() {
        if !p.value.data().iter().all(|x| x.is_finite()) {
            return Err(Error::Numeric(format!("parameter {} went non-finite", p.name)));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_zero_grad_zero_wd_is_noop() {
        let mut rng = RngStream::new(1);
        let mut store = ParamStore::new();
        store.add("w", &[4], Init::Normal(1.0), true, &mut rng);
        let before = store.value(store.id("w").unwrap()).clone();
        let mut opt = OptimizerState::new(
            &store,
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        adamw_step(&mut store, &mut opt);
        adamw_step(&mut store, &mut opt);
        assert_eq!(before.data(), store.value(0).data());
    }

    #[test]
    fn lr_schedule_matches_stated_values() {
        // warmup 3, step 8, gamma 0.6, base 0.002
        let lr = |e| lr_at_epoch(e, 0.002, 3, 8, 0.6);
        assert!((lr(2) - 0.002).abs() < 1e-9);
        assert!((lr(3) - 0.002).abs() < 1e-9);
        assert!((lr(11) - 0.0012).abs() < 1e-9);
        assert!((lr(19) - 0.00072).abs() < 1e-9);
        // warmup ramp
        assert!((lr(0) - 0.002 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let build = |seed| {
            let mut rng = RngStream::new(seed);
            let mut s = ParamStore::new();
            s.add("a", &[32, 16], Init::KaimingFanOut(16 * 9), true, &mut rng);
            s.add("b", &[16], Init::Normal(0.01), true, &mut rng);
            s
        };
        let s1 = build(9);
        let s2 = build(9);
        for (p, q) in s1.iter().zip(s2.iter()) {
            assert_eq!(p.value.data(), q.value.data());
        }
        let s3 = build(10);
        assert_ne!(s1.get(0).value.data(), s3.get(0).value.data());
    }

    #[test]
    fn duplicate_name_panics() {
        let r = std::panic::catch_unwind(|| {
            let mut rng = RngStream::new(1);
            let mut s = ParamStore::new();
            s.add("x", &[1], Init::Zeros, true, &mut rng);
            s.add("x", &[1], Init::Zeros, true, &mut rng);
        });
        assert!(r.is_err());
    }
}
