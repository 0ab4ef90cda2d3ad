//! Training loops for the three model families, multi-task loss
//! assembly, and the metric suite.

pub mod eval;
pub mod single;
pub mod two;
pub mod vae;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::AdamWConfig;

pub use eval::{evaluate_cnn, retrieval_metrics, CnnModel, CnnModelRef, RetrievalSummary};
pub use single::train_single_branch;
pub use two::train_two_branch;
pub use vae::train_vae;

/// Hyperparameters for one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub warmup_epochs: usize,
    pub decay_step: usize,
    pub gamma: f32,
    /// λ_class / λ_index of the two-branch loss.
    pub w_class: f32,
    pub w_index: f32,
    /// Label smoothing for index losses.
    pub smoothing_eps: f32,
    /// Single-branch mixing α.
    pub mixing_alpha: f32,
    /// Re-draw mixed targets every epoch (true) or once (false).
    pub resample_every_epoch: bool,
    pub seed: u64,
    /// Evaluate every k epochs (plus always at the last epoch).
    pub eval_every: usize,
    /// Cap on train-split metric evaluation sample count.
    pub train_probe: usize,
    /// Per-branch learning-rate multipliers (two-branch loop).
    pub lr_mult_class: f32,
    pub lr_mult_index: f32,
    /// VAE loss weights.
    pub lambda_gen: f32,
    pub lambda_cls: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 128,
            lr: 2e-3,
            weight_decay: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_epochs: 3,
            decay_step: 8,
            gamma: 0.6,
            w_class: 1.0,
            w_index: 1.0,
            smoothing_eps: 0.05,
            mixing_alpha: 0.0,
            resample_every_epoch: true,
            seed: 42,
            eval_every: 1,
            train_probe: 10_000,
            lr_mult_class: 1.0,
            lr_mult_index: 1.0,
            lambda_gen: 0.6,
            lambda_cls: 0.4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w_class < 0.0 || self.w_index < 0.0 || (self.w_class == 0.0 && self.w_index == 0.0)
        {
            return Err(Error::Param(
                "loss weights must be ≥ 0 and not both zero".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.mixing_alpha) {
            return Err(Error::Param(format!(
                "mixing α must be in [0,1], got {}",
                self.mixing_alpha
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Param("batch_size must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.smoothing_eps) {
            return Err(Error::Param("smoothing ε must be in [0,1)".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn should_eval(&self, epoch: usize) -> bool {
        let every = self.eval_every.max(1);
        (epoch + 1) % every == 0 || epoch + 1 == self.epochs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One metrics row. Fields that do not apply to a run stay `None` and
/// serialize to empty CSV cells.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss_total: Option<f32>,
    pub loss_class: Option<f32>,
    pub loss_index: Option<f32>,
    pub loss_recon: Option<f32>,
    pub loss_kl: Option<f32>,
    pub acc_class: Option<f32>,
    pub acc_index_top1: Option<f32>,
    pub class_from_index_top1: Option<f32>,
    pub class_from_index_top5: Option<f32>,
    pub class_consistency_top1: Option<f32>,
    pub class_consistency_top5: Option<f32>,
    pub lr: f32,
}

impl MetricsRecord {
    pub fn empty(epoch: usize, split: Split, lr: f32) -> Self {
        Self {
            epoch,
            split,
            loss_total: None,
            loss_class: None,
            loss_index: None,
            loss_recon: None,
            loss_kl: None,
            acc_class: None,
            acc_index_top1: None,
            class_from_index_top1: None,
            class_from_index_top5: None,
            class_consistency_top1: None,
            class_consistency_top5: None,
            lr,
        }
    }

    /// Invariants that hold for every record: accuracies in [0,1] and
    /// top5 ≥ top1 within each metric family.
    pub fn check(&self) -> Result<()> {
        let in01 = |v: Option<f32>, what: &str| -> Result<()> {
            if let Some(x) = v {
                if !(0.0..=1.0).contains(&x) {
                    return Err(Error::Numeric(format!("{what} = {x} outside [0,1]")));
                }
            }
            Ok(())
        };
        in01(self.acc_class, "acc_class")?;
        in01(self.acc_index_top1, "acc_index_top1")?;
        in01(self.class_from_index_top1, "class_from_index_top1")?;
        in01(self.class_from_index_top5, "class_from_index_top5")?;
        in01(self.class_consistency_top1, "class_consistency_top1")?;
        in01(self.class_consistency_top5, "class_consistency_top5")?;
        if let (Some(t1), Some(t5)) = (self.class_consistency_top1, self.class_consistency_top5) {
            if t5 < t1 {
                return Err(Error::Numeric(format!(
                    "consistency top5 {t5} < top1 {t1}"
                )));
            }
        }
        Ok(())
    }
}

/// Deterministic batch index slices over a (shuffled) permutation.
pub fn batches(perm: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
    perm.chunks(batch_size)
}
