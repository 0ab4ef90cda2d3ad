//! Single-branch training: per-sample mixed index targets, smoothed
//! cross-entropy over the N-way index head, AdamW with warmup + step
//! decay.

use crate::data::{build_index_maps, sample_mixed_target, IndexedDataset};
use crate::error::{Error, Result};
use crate::models::{ModelSpec, SingleBranchModel};
use crate::nn::loss::{softmax_xent, softmax_xent_grad};
use crate::nn::ops::Mode;
use crate::nn::{adamw_step, lr_at_epoch, OptimizerState, ParamStore};
use crate::rng::RngStream;

use super::eval::{evaluate_cnn, probe_indices, CnnModel, CnnModelRef};
use super::{MetricsRecord, Split, TrainConfig};

pub struct TrainedSingle {
    pub store: ParamStore,
    pub model: CnnModel,
    pub records: Vec<MetricsRecord>,
}

pub fn train_single_branch(
    ds: &IndexedDataset,
    test_ds: Option<&IndexedDataset>,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<TrainedSingle> {
    cfg.validate()?;
    let maps = build_index_maps(ds);
    let mut master = RngStream::new(cfg.seed);
    let mut init_rng = master.split();
    let mut train_rng = master.split();

    let mut store = ParamStore::new();
    let model = SingleBranchModel::build(spec, &mut store, &mut init_rng)?;
    let mut opt = OptimizerState::new(&store, cfg.adamw());

    // one-time target draw when resampling is off
    let fixed_targets: Option<Vec<usize>> = if cfg.resample_every_epoch {
        None
    } else {
        let mut t = Vec::with_capacity(ds.len());
        for i in 0..ds.len() {
            t.push(sample_mixed_target(
                i,
                ds.labels[i],
                &maps,
                cfg.mixing_alpha,
                &mut train_rng,
            )?);
        }
        Some(t)
    };

    let probe = probe_indices(ds.len(), cfg.train_probe, cfg.seed);
    let mut records = Vec::new();
    let mut perm: Vec<usize> = (0..ds.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(epoch, cfg.lr, cfg.warmup_epochs, cfg.decay_step, cfg.gamma);
        opt.cfg.lr = lr;
        train_rng.shuffle(&mut perm);

        let mut loss_sum = 0.0f64;
        let mut nb = 0usize;
        for chunk in perm.chunks(cfg.batch_size) {
            let x = ds.batch(chunk);
            let mut targets = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let t = match &fixed_targets {
                    Some(ts) => ts[i],
                    None => sample_mixed_target(
                        i,
                        ds.labels[i],
                        &maps,
                        cfg.mixing_alpha,
                        &mut train_rng,
                    )?,
                };
                targets.push(t);
            }
            let (out, cache) = model.forward(&mut store, &x, Mode::Train, &mut train_rng)?;
            let (loss, probs) = softmax_xent(&out.index_logits, &targets, cfg.smoothing_eps, None)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "single-branch loss diverged at epoch {epoch}"
                )));
            }
            let g = softmax_xent_grad(&probs, &targets, cfg.smoothing_eps, None);
            model.backward(&mut store, &cache, &g);
            adamw_step(&mut store, &mut opt);
            store.zero_grads();
            loss_sum += loss as f64;
            nb += 1;
        }
        crate::nn::check_store_finite(&store)?;

        if cfg.should_eval(epoch) {
            let mut train_rec = evaluate_cnn(
                CnnModelRef::Single(&model),
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
                let mean_loss = (loss_sum / nb as f64) as f32;
                train_rec.loss_total = Some(mean_loss);
                train_rec.loss_index = Some(mean_loss);
            }
            on_record(&train_rec);
            records.push(train_rec);

            if let Some(test) = test_ds {
                let test_probe: Vec<usize> = (0..test.len()).collect();
                let test_rec = evaluate_cnn(
                    CnnModelRef::Single(&model),
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

    Ok(TrainedSingle {
        store,
        model: CnnModel::Single(model),
        records,
    })
}
