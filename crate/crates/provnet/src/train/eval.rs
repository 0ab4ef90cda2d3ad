//! Evaluation: class accuracy, exact-index accuracy, class-from-index
//! (top-1 label / top-5 majority), and class-consistency metrics, all
//! derived from the retrieved training indices.

use crate::data::{IndexMaps, IndexedDataset};
use crate::error::Result;
use crate::models::{
    apply_mask_sentinel, validity_mask, Conditioning, ForwardOut, SingleBranchModel,
    TwoBranchModel, Variant,
};
use crate::nn::ops::Mode;
use crate::nn::ParamStore;
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::util::{argmax, majority_label, top_k_indices};

use super::{MetricsRecord, Split};

const EVAL_BATCH: usize = 256;

/// Either CNN family behind one evaluation interface.
pub enum CnnModel {
    Single(SingleBranchModel),
    Two(TwoBranchModel),
}

/// Borrowed view used by the evaluators.
#[derive(Clone, Copy)]
pub enum CnnModelRef<'a> {
    Single(&'a SingleBranchModel),
    Two(&'a TwoBranchModel),
}

impl CnnModel {
    pub fn as_ref(&self) -> CnnModelRef<'_> {
        match self {
            CnnModel::Single(m) => CnnModelRef::Single(m),
            CnnModel::Two(m) => CnnModelRef::Two(m),
        }
    }

    pub fn spec(&self) -> &crate::models::ModelSpec {
        self.as_ref().spec()
    }

    pub fn forward_eval(&self, store: &mut ParamStore, x: &Tensor) -> Result<ForwardOut> {
        self.as_ref().forward_eval(store, x)
    }
}

impl<'a> CnnModelRef<'a> {
    pub fn spec(&self) -> &'a crate::models::ModelSpec {
        match self {
            CnnModelRef::Single(m) => &m.spec,
            CnnModelRef::Two(m) => &m.spec,
        }
    }

    /// Eval-mode forward on the inference path (predicted conditioning).
    pub fn forward_eval(&self, store: &mut ParamStore, x: &Tensor) -> Result<ForwardOut> {
        // Eval mode draws nothing; the rng is inert.
        let mut rng = RngStream::new(0);
        match self {
            CnnModelRef::Single(m) => Ok(m.forward(store, x, Mode::Eval, &mut rng)?.0),
            CnnModelRef::Two(m) => Ok(m
                .forward(store, x, Mode::Eval, &mut rng, Conditioning::Predicted)?
                .0),
        }
    }
}

/// Retrieved training indices for one input, best first.
pub struct Retrieval {
    pub predicted_class: Option<usize>,
    pub global_indices: Vec<usize>,
}

/// Run the model and retrieve the top-k training indices per input.
/// Class-conditional models mask the index head to the predicted
/// class's K_ŷ valid slots and map local → global.
pub fn retrieve(
    model: CnnModelRef<'_>,
    store: &mut ParamStore,
    x: &Tensor,
    maps: &IndexMaps,
    k: usize,
) -> Result<Vec<Retrieval>> {
    let out = model.forward_eval(store, x)?;
    let n = x.dim(0);
    let mut result = Vec::with_capacity(n);
    let conditional = model.spec().conditional;
    let class_counts: Vec<usize> = (0..maps.num_classes()).map(|c| maps.class_count(c)).collect();

    if conditional {
        let class_logits = out.class_logits.as_ref().expect("conditional has class head");
        let predicted: Vec<usize> = (0..n).map(|i| argmax(class_logits.row(i))).collect();
        let m = out.index_logits.dim(1);
        let mask = validity_mask(&predicted, &class_counts, m);
        let mut logits = out.index_logits;
        apply_mask_sentinel(&mut logits, &mask);
        for i in 0..n {
            let cls = predicted[i];
            let kk = k.min(class_counts[cls]);
            let locals = top_k_indices(logits.row(i), kk);
            let globals = locals
                .into_iter()
                .map(|l| maps.local_to_global(cls, l))
                .collect();
            result.push(Retrieval {
                predicted_class: Some(cls),
                global_indices: globals,
            });
        }
    } else {
        let predicted: Option<Vec<usize>> = out
            .class_logits
            .as_ref()
            .map(|cl| (0..n).map(|i| argmax(cl.row(i))).collect());
        for i in 0..n {
            let globals = top_k_indices(out.index_logits.row(i), k);
            result.push(Retrieval {
                predicted_class: predicted.as_ref().map(|p| p[i]),
                global_indices: globals,
            });
        }
    }
    Ok(result)
}

/// Label-based retrieval quality at several k.
#[derive(Debug, Clone, Default)]
pub struct RetrievalSummary {
    /// label(top-1) == true label
    pub top1: f32,
    /// majority label of top-5 == true label (ties → highest-ranked)
    pub top5_majority: f32,
    pub top10_majority: f32,
    /// any of the top-k carries the true label
    pub consistency_top1: f32,
    pub consistency_top5: f32,
}

pub fn retrieval_metrics(
    retrievals: &[Retrieval],
    train_labels: &[usize],
    true_labels: &[usize],
) -> RetrievalSummary {
    let n = retrievals.len().max(1) as f32;
    let mut s = RetrievalSummary::default();
    for (r, &y) in retrievals.iter().zip(true_labels.iter()) {
        let labels: Vec<usize> = r.global_indices.iter().map(|&g| train_labels[g]).collect();
        if labels.is_empty() {
            continue;
        }
        if labels[0] == y {
            s.top1 += 1.0;
            s.consistency_top1 += 1.0;
        }
        let k5 = labels.len().min(5);
        if majority_label(&labels[..k5]) == y {
            s.top5_majority += 1.0;
        }
        let k10 = labels.len().min(10);
        if majority_label(&labels[..k10]) == y {
            s.top10_majority += 1.0;
        }
        if labels[..k5].contains(&y) {
            s.consistency_top5 += 1.0;
        }
    }
    s.top1 /= n;
    s.top5_majority /= n;
    s.top10_majority /= n;
    s.consistency_top1 /= n;
    s.consistency_top5 /= n;
    s
}

/// Full metric row over an evaluation set. `eval_indices` selects the
/// probe; `is_train_split` additionally scores exact-index accuracy
/// against the samples' own indices.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_cnn(
    model: CnnModelRef<'_>,
    store: &mut ParamStore,
    eval_ds: &IndexedDataset,
    eval_indices: &[usize],
    train_ds: &IndexedDataset,
    maps: &IndexMaps,
    split: Split,
    epoch: usize,
    lr: f32,
) -> Result<MetricsRecord> {
    let mut rec = MetricsRecord::empty(epoch, split, lr);
    let mut correct_class = 0usize;
    let mut correct_index = 0usize;
    let mut all_retrievals = Vec::with_capacity(eval_indices.len());
    let mut true_labels = Vec::with_capacity(eval_indices.len());

    for chunk in eval_indices.chunks(EVAL_BATCH) {
        let x = eval_ds.batch(chunk);
        let retr = retrieve(model, store, &x, maps, 10)?;
        for (pos, r) in retr.iter().enumerate() {
            let i = chunk[pos];
            let y = eval_ds.labels[i];
            if let Some(p) = r.predicted_class {
                if p == y {
                    correct_class += 1;
                }
            }
            if split == Split::Train {
                if let Some(&top1) = r.global_indices.first() {
                    if top1 == i {
                        correct_index += 1;
                    }
                }
            }
            true_labels.push(y);
        }
        all_retrievals.extend(retr);
    }

    let n = eval_indices.len().max(1) as f32;
    if model.spec().variant == Variant::TwoBranch {
        rec.acc_class = Some(correct_class as f32 / n);
    }
    if split == Split::Train {
        rec.acc_index_top1 = Some(correct_index as f32 / n);
    }
    let summary = retrieval_metrics(&all_retrievals, &train_ds.labels, &true_labels);
    rec.class_from_index_top1 = Some(summary.top1);
    rec.class_from_index_top5 = Some(summary.top5_majority);
    rec.class_consistency_top1 = Some(summary.consistency_top1);
    rec.class_consistency_top5 = Some(summary.consistency_top5);
    rec.check()?;
    Ok(rec)
}

/// Deterministic probe: all indices when the set is small enough,
/// otherwise a seeded sample without replacement, sorted.
pub fn probe_indices(n: usize, cap: usize, seed: u64) -> Vec<usize> {
    if n <= cap {
        (0..n).collect()
    } else {
        let mut rng = RngStream::new(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut picked = rng.sample_without_replacement(n, cap);
        picked.sort_unstable();
        picked
    }
}
