//! Two-branch training: teacher-forced forward, weighted sum of the
//! class loss and the (masked, smoothed) index loss, one joint loop
//! with per-branch learning-rate multipliers.

use crate::data::{build_index_maps, IndexedDataset};
use crate::error::{Error, Result};
use crate::models::{validity_mask, Conditioning, ModelSpec, TwoBranchModel};
use crate::nn::loss::{softmax_xent, softmax_xent_grad};
use crate::nn::ops::Mode;
use crate::nn::{adamw_step, lr_at_epoch, OptimizerState, ParamStore};
use crate::rng::RngStream;

use super::eval::{evaluate_cnn, probe_indices, CnnModel, CnnModelRef};
use super::{MetricsRecord, Split, TrainConfig};

pub struct TrainedTwo {
    pub store: ParamStore,
    pub model: CnnModel,
    pub records: Vec<MetricsRecord>,
}

pub fn train_two_branch(
    ds: &IndexedDataset,
    test_ds: Option<&IndexedDataset>,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<TrainedTwo> {
    cfg.validate()?;
    let maps = build_index_maps(ds);
    let mut master = RngStream::new(cfg.seed);
    let mut init_rng = master.split();
    let mut train_rng = master.split();

    let mut store = ParamStore::new();
    let model = TwoBranchModel::build(spec, &mut store, &mut init_rng)?;
    let mut opt = OptimizerState::new(&store, cfg.adamw());
    // branch-specific learning rates: cnn2.* follows the index branch,
    // everything else (incl. shared backbone) the class branch
    if cfg.lr_mult_class != 1.0 || cfg.lr_mult_index != 1.0 {
        for (id, p) in store.iter().enumerate() {
            let mult = if p.name.starts_with("cnn2.") {
                cfg.lr_mult_index
            } else {
                cfg.lr_mult_class
            };
            opt.set_lr_mult(id, mult);
        }
    }

    // per-sample index target: local k (conditional) or global (independent)
    let index_targets: Vec<usize> = if spec.conditional {
        (0..ds.len()).map(|i| maps.global_to_local(i).1).collect()
    } else {
        (0..ds.len()).collect()
    };
    let m = spec.index_output_size;

    let probe = probe_indices(ds.len(), cfg.train_probe, cfg.seed);
    let mut records = Vec::new();
    let mut perm: Vec<usize> = (0..ds.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(epoch, cfg.lr, cfg.warmup_epochs, cfg.decay_step, cfg.gamma);
        opt.cfg.lr = lr;
        train_rng.shuffle(&mut perm);

        let (mut lsum_total, mut lsum_class, mut lsum_index) = (0.0f64, 0.0f64, 0.0f64);
        let mut nb = 0usize;
        for chunk in perm.chunks(cfg.batch_size) {
            let x = ds.batch(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| ds.labels[i]).collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| index_targets[i]).collect();

            let (out, cache) = model.forward(
                &mut store,
                &x,
                Mode::Train,
                &mut train_rng,
                Conditioning::TeacherForced(&labels),
            )?;
            let class_logits = out.class_logits.as_ref().expect("two-branch class head");

            let (loss_class, probs_class) = softmax_xent(class_logits, &labels, 0.0, None)?;
            let mask = if spec.conditional {
                Some(validity_mask(&labels, &ds.class_counts, m))
            } else {
                None
            };
            let (loss_index, probs_index) = softmax_xent(
                &out.index_logits,
                &targets,
                cfg.smoothing_eps,
                mask.as_deref(),
            )?;
            let loss_total = cfg.w_class * loss_class + cfg.w_index * loss_index;
            if !loss_total.is_finite() {
                return Err(Error::Numeric(format!(
                    "two-branch loss diverged at epoch {epoch}"
                )));
            }

            let mut g_class = softmax_xent_grad(&probs_class, &labels, 0.0, None);
            g_class.scale(cfg.w_class);
            let mut g_index =
                softmax_xent_grad(&probs_index, &targets, cfg.smoothing_eps, mask.as_deref());
            g_index.scale(cfg.w_index);

            model.backward(&mut store, &cache, &g_class, &g_index);
            adamw_step(&mut store, &mut opt);
            store.zero_grads();

            lsum_total += loss_total as f64;
            lsum_class += loss_class as f64;
            lsum_index += loss_index as f64;
            nb += 1;
        }
        crate::nn::check_store_finite(&store)?;

        if cfg.should_eval(epoch) {
            let mut train_rec = evaluate_cnn(
                CnnModelRef::Two(&model),
                &mut store,
                ds,
                &probe,
                ds,
                &maps,
                Split::Train,
                epoch,
                lr,
            )?;
            if nb > 0 {
                train_rec.loss_total = Some((lsum_total / nb as f64) as f32);
                train_rec.loss_class = Some((lsum_class / nb as f64) as f32);
                train_rec.loss_index = Some((lsum_index / nb as f64) as f32);
            }
            on_record(&train_rec);
            records.push(train_rec);

            if let Some(test) = test_ds {
                let test_probe: Vec<usize> = (0..test.len()).collect();
                let test_rec = evaluate_cnn(
                    CnnModelRef::Two(&model),
                    &mut store,
                    test,
                    &test_probe,
                    ds,
                    &maps,
                    Split::Test,
                    epoch,
                    lr,
                )?;
                on_record(&test_rec);
                records.push(test_rec);
            }
        }
    }

    Ok(TrainedTwo {
        store,
        model: CnnModel::Two(model),
        records,
    })
}
