//! Provenance-VAE training: joint minimization of
//! λ_gen·(recon + KL) + λ_cls·(class + index), with each sample's index
//! loss routed to its ground-truth class head only.

use crate::data::{build_index_maps, IndexedDataset};
use crate::error::{Error, Result};
use crate::models::vae::{VaeModel, VaeSpec};
use crate::nn::loss::{bce_recon, kl_gaussian, softmax_xent, softmax_xent_grad};
use crate::nn::ops::Mode;
use crate::nn::{adamw_step, lr_at_epoch, OptimizerState, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::util::argmax;

use super::{MetricsRecord, Split, TrainConfig};

pub struct TrainedVae {
    pub store: ParamStore,
    pub model: VaeModel,
    pub records: Vec<MetricsRecord>,
}

/// Trains on [0,1] images (the VAE consumes unnormalized pixels).
pub fn train_vae(
    ds: &IndexedDataset,
    test_ds: Option<&IndexedDataset>,
    spec: &VaeSpec,
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<TrainedVae> {
    cfg.validate()?;
    if ds.norm.is_some() {
        return Err(Error::Param("train_vae expects unnormalized [0,1] images".into()));
    }
    let maps = build_index_maps(ds);
    let mut master = RngStream::new(cfg.seed);
    let mut init_rng = master.split();
    let mut train_rng = master.split();

    let mut store = ParamStore::new();
    let model = VaeModel::build(spec, &mut store, &mut init_rng)?;
    let mut opt = OptimizerState::new(&store, cfg.adamw());

    let local_targets: Vec<usize> = (0..ds.len()).map(|i| maps.global_to_local(i).1).collect();
    let mut perm: Vec<usize> = (0..ds.len()).collect();
    let mut records = Vec::new();

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(epoch, cfg.lr, cfg.warmup_epochs, cfg.decay_step, cfg.gamma);
        opt.cfg.lr = lr;
        train_rng.shuffle(&mut perm);

        let (mut s_total, mut s_recon, mut s_kl, mut s_class, mut s_index) =
            (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut nb = 0usize;

        for chunk in perm.chunks(cfg.batch_size) {
            let x = ds.batch(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| ds.labels[i]).collect();
            let n = chunk.len();

            let (out, cache) = model.forward(&mut store, &x, Mode::Train, &mut train_rng)?;

            let (loss_recon, mut g_xhat) = bce_recon(&out.xhat, &x);
            let (loss_kl, mut g_mu, mut g_logvar) = kl_gaussian(&out.mu, &out.logvar);
            let (loss_class, probs_class) = softmax_xent(&out.class_logits, &labels, 0.0, None)?;
            let mut g_class = softmax_xent_grad(&probs_class, &labels, 0.0, None);

            // index loss per ground-truth head: gather rows per class
            let mut loss_index = 0.0f64;
            let mut g_index: Vec<Tensor> = out
                .index_logits
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect();
            for y in 0..spec.num_classes {
                let rows: Vec<usize> = (0..n).filter(|&r| labels[r] == y).collect();
                if rows.is_empty() {
                    continue;
                }
                let ky = spec.class_counts[y];
                let mut sub = Vec::with_capacity(rows.len() * ky);
                let mut sub_t = Vec::with_capacity(rows.len());
                for &r in &rows {
                    sub.extend_from_slice(out.index_logits[y].row(r));
                    sub_t.push(local_targets[chunk[r]]);
                }
                let sub = Tensor::from_vec(&[rows.len(), ky], sub);
                let (l, p) = softmax_xent(&sub, &sub_t, cfg.smoothing_eps, None)?;
                let frac = rows.len() as f32 / n as f32;
                loss_index += (l * frac) as f64;
                let mut g = softmax_xent_grad(&p, &sub_t, cfg.smoothing_eps, None);
                g.scale(frac * cfg.lambda_cls);
                for (gi, &r) in rows.iter().enumerate() {
                    let dst = &mut g_index[y].data_mut()[r * ky..(r + 1) * ky];
                    dst.copy_from_slice(&g.row(gi)[..ky]);
                }
            }

            let loss_total = cfg.lambda_gen * (loss_recon + loss_kl)
                + cfg.lambda_cls * (loss_class + loss_index as f32);
            if !loss_total.is_finite() {
                return Err(Error::Numeric(format!("VAE loss diverged at epoch {epoch}")));
            }

            g_xhat.scale(cfg.lambda_gen);
            g_mu.scale(cfg.lambda_gen);
            g_logvar.scale(cfg.lambda_gen);
            g_class.scale(cfg.lambda_cls);
            model.backward(&mut store, &cache, &g_xhat, &g_mu, &g_logvar, &g_class, &g_index);
            adamw_step(&mut store, &mut opt);
            store.zero_grads();

            s_total += loss_total as f64;
            s_recon += loss_recon as f64;
            s_kl += loss_kl as f64;
            s_class += loss_class as f64;
            s_index += loss_index;
            nb += 1;
        }
        crate::nn::check_store_finite(&store)?;

        if cfg.should_eval(epoch) {
            let probe = super::eval::probe_indices(ds.len(), cfg.train_probe, cfg.seed);
            let (acc_class, acc_index) = evaluate_vae(&model, &mut store, ds, &probe, &local_targets)?;
            let mut rec = MetricsRecord::empty(epoch, Split::Train, lr);
            if nb > 0 {
                rec.loss_total = Some((s_total / nb as f64) as f32);
                rec.loss_recon = Some((s_recon / nb as f64) as f32);
                rec.loss_kl = Some((s_kl / nb as f64) as f32);
                rec.loss_class = Some((s_class / nb as f64) as f32);
                rec.loss_index = Some((s_index / nb as f64) as f32);
            }
            rec.acc_class = Some(acc_class);
            rec.acc_index_top1 = Some(acc_index);
            rec.check()?;
            on_record(&rec);
            records.push(rec);

            if let Some(test) = test_ds {
                let idx: Vec<usize> = (0..test.len()).collect();
                let (acc_class, _) = evaluate_vae(&model, &mut store, test, &idx, &[])?;
                let mut rec = MetricsRecord::empty(epoch, Split::Test, lr);
                rec.acc_class = Some(acc_class);
                rec.check()?;
                on_record(&rec);
                records.push(rec);
            }
        }
    }

    Ok(TrainedVae {
        store,
        model,
        records,
    })
}

/// (class accuracy, ground-truth-head exact index accuracy). Index
/// accuracy is skipped when `local_targets` is empty, i.e. on held-out
/// splits.
pub fn evaluate_vae(
    model: &VaeModel,
    store: &mut ParamStore,
    ds: &IndexedDataset,
    indices: &[usize],
    local_targets: &[usize],
) -> Result<(f32, f32)> {
    let mut correct_class = 0usize;
    let mut correct_index = 0usize;
    let mut rng = RngStream::new(0);
    for chunk in indices.chunks(256) {
        let x = ds.batch(chunk);
        let (out, _) = model.forward(store, &x, Mode::Eval, &mut rng)?;
        for (r, &i) in chunk.iter().enumerate() {
            let y = ds.labels[i];
            if argmax(out.class_logits.row(r)) == y {
                correct_class += 1;
            }
            if !local_targets.is_empty() && argmax(out.index_logits[y].row(r)) == local_targets[i]
            {
                correct_index += 1;
            }
        }
    }
    let n = indices.len().max(1) as f32;
    Ok((correct_class as f32 / n, correct_index as f32 / n))
}
