//! Operational surface: CLI argument handling, config resolution,
//! experiment dispatch, checkpoint persistence, and result bundles.

pub mod checkpoint;
pub mod config;
pub mod results;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::analysis;
use crate::data::{self, distort, IndexedDataset};
use crate::error::{Error, Result};
use crate::models::{
    vae::{self, VaeSpec},
    ModelSpec, SharingLevel, SizePreset, Variant,
};
use crate::nn::loss::softmax_probs;
use crate::rng::RngStream;
use crate::train::{
    self, eval::retrieval_metrics, eval::retrieve, CnnModel, MetricsRecord, TrainConfig,
};
use crate::util::{argmax, top_k_indices};

use checkpoint::{load_checkpoint, save_checkpoint, DatasetMeta, ModelHeader};
use config::{apply_defaults, dataset_dir, Experiment, KvConfig, RunConfig};

/// MNIST/FashionMNIST normalization statistics.
pub const NORM_MU: f32 = 0.1307;
pub const NORM_SIGMA: f32 = 0.3081;

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Io(_) => 3,
        Error::Numeric(_) => 4,
        _ => 1,
    }
}

fn usage() -> String {
    let mut s = String::from(
        "usage: provnet <experiment> [--config <path>] [--out <dir>] [--key=value ...]\n\nexperiments:\n",
    );
    for e in Experiment::ALL {
        s.push_str("  ");
        s.push_str(e.name());
        s.push('\n');
    }
    s.push_str("\nconfig keys (defaults come from the preset):\n");
    for (k, doc) in config::SCHEMA {
        s.push_str(&format!("  {k:<24} {doc}\n"));
    }
    s
}

/// Entry point behind the `provnet` binary.
pub fn cli_main(args: &[String]) -> Result<()> {
    if args.is_empty() || args[0] == "help" || args[0] == "--help" || args[0] == "-h" {
        println!("{}", usage());
        return Ok(());
    }
    let experiment = Experiment::parse(&args[0])?;
    let mut kv = KvConfig::default();
    let mut out_dir: Option<PathBuf> = None;
    let mut file_kv = KvConfig::default();

    let mut i = 1;
    while i < args.len() {
        let a = &args[i];
        if let Some(rest) = a.strip_prefix("--") {
            if let Some((k, v)) = rest.split_once('=') {
                match k {
                    "config" => {
                        let text = std::fs::read_to_string(v)
                            .map_err(|e| Error::Config(format!("cannot read config {v}: {e}")))?;
                        file_kv.parse_text(&text)?;
                    }
                    "out" => out_dir = Some(PathBuf::from(v)),
                    _ => kv.set(k, v)?,
                }
            } else {
                match rest {
                    "config" | "out" => {
                        i += 1;
                        let v = args.get(i).ok_or_else(|| {
                            Error::Config(format!("--{rest} expects a value"))
                        })?;
                        if rest == "config" {
                            let text = std::fs::read_to_string(v).map_err(|e| {
                                Error::Config(format!("cannot read config {v}: {e}"))
                            })?;
                            file_kv.parse_text(&text)?;
                        } else {
                            out_dir = Some(PathBuf::from(v));
                        }
                    }
                    _ => return Err(Error::Config(format!("unknown flag --{rest}"))),
                }
            }
        } else {
            return Err(Error::Config(format!("unexpected argument '{a}'")));
        }
        i += 1;
    }

    // flags override file values; defaults fill the rest
    for (k, v) in file_kv.iter() {
        if kv.get(k).is_none() {
            kv.set(k, v)?;
        }
    }
    apply_defaults(&mut kv, experiment)?;

    let out_dir = out_dir.unwrap_or_else(|| PathBuf::from("provnet-runs").join(experiment.name()));
    run(&RunConfig {
        experiment,
        kv,
        out_dir,
    })
}

/// Dispatch one experiment and write its results bundle.
pub fn run(rc: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&rc.out_dir)?;
    results::write_config_snapshot(&rc.out_dir, rc.experiment.name(), &rc.kv.snapshot())?;
    match rc.experiment {
        Experiment::TrainSingle => run_train_single(rc),
        Experiment::TrainTwo => run_train_two(rc),
        Experiment::TrainVae => run_train_vae(rc),
        Experiment::SweepMixing => run_sweep_mixing(rc),
        Experiment::SweepSubset => run_sweep_subset(rc),
        Experiment::SweepSharing => run_sweep_sharing(rc),
        Experiment::Robustness => run_robustness(rc),
        Experiment::DebugEntropy => run_debug_entropy(rc),
        Experiment::Mia => run_mia(rc),
        Experiment::Attribute => run_attribute(rc),
        Experiment::Generate => run_generate(rc),
        Experiment::ExportEmbeddings => run_export_embeddings(rc),
    }
}

// ---------------------------------------------------------------- data

/// Load the raw train/test pair named by the config.
pub fn load_raw(kv: &KvConfig) -> Result<(IndexedDataset, IndexedDataset)> {
    let dir = dataset_dir(kv)?;
    let name = kv.get("dataset.name").unwrap_or("mnist");
    let train = data::load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
        name,
    )?;
    let test = data::load_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
        name,
    )?;
    Ok((train, test))
}

/// Stratified training subset per `dataset.subset_ratio`, seeded.
pub fn subset_raw(kv: &KvConfig, train: &IndexedDataset) -> Result<IndexedDataset> {
    let ratio = kv.get_f32("dataset.subset_ratio")?;
    if (ratio - 1.0).abs() < 1e-9 {
        return Ok(train.clone());
    }
    let mut rng = RngStream::new(kv.get_u64("seed")? ^ 0x5b5e7u64);
    Ok(train.stratified_subset(ratio, &mut rng)?.0)
}

pub fn train_cfg(kv: &KvConfig) -> Result<TrainConfig> {
    let resample = match kv.require("mixing.resample")? {
        "every_epoch" => true,
        "never" => false,
        v => return Err(Error::Config(format!("mixing.resample: unknown value '{v}'"))),
    };
    Ok(TrainConfig {
        epochs: kv.get_usize("train.epochs")?,
        batch_size: kv.get_usize("train.batch_size")?,
        lr: kv.get_f32("opt.lr")?,
        weight_decay: kv.get_f32("opt.weight_decay")?,
        beta1: kv.get_f32("opt.beta1")?,
        beta2: kv.get_f32("opt.beta2")?,
        eps: kv.get_f32("opt.eps")?,
        warmup_epochs: kv.get_usize("sched.warmup_epochs")?,
        decay_step: kv.get_usize("sched.decay_step")?,
        gamma: kv.get_f32("sched.gamma")?,
        w_class: kv.get_f32("loss.w_class")?,
        w_index: kv.get_f32("loss.w_index")?,
        smoothing_eps: kv.get_f32("loss.smoothing")?,
        mixing_alpha: kv.get_f32("mixing.alpha")?,
        resample_every_epoch: resample,
        seed: kv.get_u64("seed")?,
        eval_every: kv.get_usize("train.eval_every")?,
        train_probe: kv.get_usize("train.probe")?,
        lr_mult_class: kv.get_f32("opt.lr_mult_class")?,
        lr_mult_index: kv.get_f32("opt.lr_mult_index")?,
        lambda_gen: kv.get_f32("vae.lambda_gen")?,
        lambda_cls: kv.get_f32("vae.lambda_cls")?,
    })
}

pub fn model_spec(kv: &KvConfig, ds: &IndexedDataset) -> Result<ModelSpec> {
    let variant = match kv.require("model.variant")? {
        "single" => Variant::SingleBranch,
        "two" => Variant::TwoBranch,
        v => return Err(Error::Config(format!("model.variant: unknown value '{v}'"))),
    };
    let conditional = kv.get_bool("model.conditional")?;
    let size = SizePreset::parse(kv.require("model.size")?)?;
    let sharing_level = SharingLevel::parse(kv.require("model.sharing_level")?)?;
    let index_output_size = if variant == Variant::TwoBranch && conditional {
        ds.class_counts.iter().copied().max().unwrap_or(0)
    } else {
        ds.len()
    };
    let spec = ModelSpec {
        variant,
        conditional: conditional && variant == Variant::TwoBranch,
        size,
        sharing_level,
        num_classes: ds.num_classes,
        index_output_size,
    };
    spec.validate()?;
    Ok(spec)
}

fn config_map(kv: &KvConfig) -> BTreeMap<String, String> {
    kv.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
}

fn final_rows(records: &[MetricsRecord]) -> serde_json::Value {
    let last_train = records.iter().rev().find(|r| r.split == train::Split::Train);
    let last_test = records.iter().rev().find(|r| r.split == train::Split::Test);
    json!({
        "train": last_train.map(|r| serde_json::to_value(r).unwrap()),
        "test": last_test.map(|r| serde_json::to_value(r).unwrap()),
    })
}

// ------------------------------------------------------------ training

fn run_train_single(rc: &RunConfig) -> Result<()> {
    let kv = &rc.kv;
    let (train_raw, test_raw) = load_raw(kv)?;
    let sub = subset_raw(kv, &train_raw)?;
    let train_n = sub.normalize(NORM_MU, NORM_SIGMA)?;
    let test_n = test_raw.normalize(NORM_MU, NORM_SIGMA)?;
    let spec = model_spec(kv, &train_n)?;
    let cfg = train_cfg(kv)?;

    let trained = train::train_single_branch(&train_n, Some(&test_n), &spec, &cfg, |r| {
        log_record(r);
    })?;
    results::write_metrics_csv(&rc.out_dir, &trained.records)?;
    if kv.get_bool("out.checkpoint")? {
        save_checkpoint(
            &rc.out_dir.join("checkpoint.pvnt"),
            &ModelHeader::Cnn { spec: spec.clone() },
            &DatasetMeta::from_dataset(&train_n),
            &config_map(kv),
            &trained.store,
        )?;
    }
    let acct = match &trained.model {
        CnnModel::Single(m) => m.accounting(&trained.store),
        CnnModel::Two(m) => m.accounting(&trained.store),
    };
    results::write_summary(
        &rc.out_dir,
        &json!({
            "experiment": "train-single",
            "n_train": train_n.len(),
            "params_total": acct.total_unique,
            "final": final_rows(&trained.records),
        }),
    )?;
    Ok(())
}

fn run_train_two(rc: &RunConfig) -> Result<()> {
    let kv = &rc.kv;
    let (train_raw, test_raw) = load_raw(kv)?;
    let sub = subset_raw(kv, &train_raw)?;
    let train_n = sub.normalize(NORM_MU, NORM_SIGMA)?;
    let test_n = test_raw.normalize(NORM_MU, NORM_SIGMA)?;
    let spec = model_spec(kv, &train_n)?;
    let cfg = train_cfg(kv)?;

    let trained = train::train_two_branch(&train_n, Some(&test_n), &spec, &cfg, |r| {
        log_record(r);
    })?;
    results::write_metrics_csv(&rc.out_dir, &trained.records)?;
    if kv.get_bool("out.checkpoint")? {
        save_checkpoint(
            &rc.out_dir.join("checkpoint.pvnt"),
            &ModelHeader::Cnn { spec: spec.clone() },
            &DatasetMeta::from_dataset(&train_n),
            &config_map(kv),
            &trained.store,
        )?;
    }
    let acct = match &trained.model {
        CnnModel::Two(m) => m.accounting(&trained.store),
        CnnModel::Single(m) => m.accounting(&trained.store),
    };
    results::write_summary(
        &rc.out_dir,
        &json!({
            "experiment": "train-two",
            "n_train": train_n.len(),
            "index_output_size": spec.index_output_size,
            "params_total": acct.total_unique,
            "params_shared": acct.shared,
            "sharing_ratio": acct.sharing_ratio(),
            "final": final_rows(&trained.records),
        }),
    )?;
    Ok(())
}

fn run_train_vae(rc: &RunConfig) -> Result<()> {
    let kv = &rc.kv;
    let (train_raw, _test_raw) = load_raw(kv)?;
    let sub = subset_raw(kv, &train_raw)?;
    let spec = VaeSpec {
        latent_dim: kv.get_usize("vae.latent_dim")?,
        num_classes: sub.num_classes,
        class_counts: sub.class_counts.clone(),
    };
    let cfg = train_cfg(kv)?;
    let trained = train::train_vae(&sub, None, &spec, &cfg, |r| {
        log_record(r);
    })?;
    results::write_metrics_csv(&rc.out_dir, &trained.records)?;
    if kv.get_bool("out.checkpoint")? {
        save_checkpoint(
            &rc.out_dir.join("checkpoint.pvnt"),
            &ModelHeader::Vae { spec: spec.clone() },
            &DatasetMeta::from_dataset(&sub),
            &config_map(kv),
            &trained.store,
        )?;
    }
    results::write_summary(
        &rc.out_dir,
        &json!({
            "experiment": "train-vae",
            "n_train": sub.len(),
            "latent_dim": spec.latent_dim,
            "final": final_rows(&trained.records),
        }),
    )?;
    Ok(())
}

// -------------------------------------------------------------- sweeps

fn run_sweep_mixing(rc: &RunConfig) -> Result<()> {
    let kv = &rc.kv;
    let alphas = kv.get_f32_list("sweep.alphas")?;
    let (train_raw, test_raw) = load_raw(kv)?;
    let sub = subset_raw(kv, &train_raw)?;
    let train_n = sub.normalize(NORM_MU, NORM_SIGMA)?;
    let test_n = test_raw.normalize(NORM_MU, NORM_SIGMA)?;
    let spec = model_spec(kv, &train_n)?;
    let base_cfg = train_cfg(kv)?;

    let mut table = Vec::new();
    for &alpha in &alphas {
        eprintln!("[sweep-mixing] α = {alpha}");
        let cfg = TrainConfig {
            mixing_alpha: alpha,
            ..base_cfg.clone()
        };
        let trained = train::train_single_branch(&train_n, Some(&test_n), &spec, &cfg, |_| {})?;
        let point_dir = rc.out_dir.join("points").join(format!("alpha_{alpha}"));
        results::write_metrics_csv(&point_dir, &trained.records)?;
        let last_train = trained
            .records
            .iter()
            .rev()
            .find(|r| r.split == train::Split::Train)
            .cloned();
        let last_test = trained
            .records
            .iter()
            .rev()
            .find(|r| r.split == train::Split::Test)
            .cloned();
        table.push(json!({
            "alpha": alpha,
            "train_index_acc": last_train.as_ref().and_then(|r| r.acc_index_top1),
            "train_class_from_index_top1": last_train.as_ref().and_then(|r| r.class_from_index_top1),
            "test_class_from_index_top1": last_test.as_ref().and_then(|r| r.class_from_index_top1),
            "test_class_from_index_top5": last_test.as_ref().and_then(|r| r.class_from_index_top5),
        }));
    }
    let mut csv = String::from(
        "alpha,train_index_acc,train_class_from_index_top1,test_class_from_index_top1,test_class_from_index_top5\n",
    );
    for row in &table {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row["alpha"],
            row["train_index_acc"].as_f64().map(|v| v.to_string()).unwrap_or_default(),
            row["train_class_from_index_top1"].as_f64().map(|v| v.to_string()).unwrap_or_default(),
            row["test_class_from_index_top1"].as_f64().map(|v| v.to_string()).unwrap_or_default(),
            row["test_class_from_index_top5"].as_f64().map(|v| v.to_string()).unwrap_or_default(),
        ));
    }
    std::fs::write(rc.out_dir.join("sweep.csv"), csv)?;
    results::write_summary(
        &rc.out_dir,
        &json!({ "experiment": "sweep-mixing", "points": table }),
    )?;
    Ok(())
}

fn run_sweep_subset(rc: &RunConfig) -> Result<()> {
    let kv = &rc.kv;
    let ratios = kv.get_f32_list("sweep.ratios")?;
    let (train_raw, test_raw) = load_raw(kv)?;
    let test_n = test_raw.normalize(NORM_MU, NORM_SIGMA)?;
    let base_cfg = train_cfg(kv)?;

    let mut table = Vec::new();
    for &ratio in &ratios {
        eprintln!("[sweep-subset] ratio = {ratio}");
        let mut rng = RngStream::new(base_cfg.seed ^ 0x5b5e7u64);
        let sub = if (ratio - 1.0).abs() < 1e-9 {
            train_raw.clone()
        } else {
            train_raw.stratified_subset(ratio, &mut rng)?.0
        };
        let train_n = sub.normalize(NORM_MU, NORM_SIGMA)?;
        let spec = model_spec(kv, &train_n)?;
        let trained = train::train_two_branch(&train_n, Some(&test_n), &spec, &base_cfg, |_| {})?;
        let point_dir = rc.out_dir.join("points").join(format!("ratio_{ratio}"));
        results::write_metrics_csv(&point_dir, &trained.records)?;

        // Table-1 style read-out: main accuracy + retrieval top-1/5/10
        let maps = data::build_index_maps(&train_n);
        let mut store = trained.store;
        let idx: Vec<usize> = (0..test_n.len()).collect();
        let mut retrievals = Vec::new();
        let mut true_labels = Vec::new();
        let mut correct_class = 0usize;
        for chunk in idx.chunks(256) {
            let x = test_n.batch(chunk);
            let r = retrieve(trained.model.as_ref(), &mut store, &x, &maps, 10)?;
            for (pos, rr) in r.iter().enumerate() {
                let y = test_n.labels[chunk[pos]];
                if rr.predicted_class == Some(y) {
                    correct_class += 1;
                }
                true_labels.push(y);
            }
            retrievals.extend(r);
        }
        let summary = retrieval_metrics(&retrievals, &train_n.labels, &true_labels);
        table.push(json!({
            "ratio": ratio,
            "samples": train_n.len(),
            "main_branch_acc": correct_class as f64 / test_n.len() as f64,
            "top1": summary.top1,
            "top5": summary.top5_majority,
            "top10": summary.top10_majority,
        }));
    }
    let mut csv = String::from("ratio,samples,main_branch_acc,top1,top5,top10\n");
    for row in &table {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row["ratio"], row["samples"], row["main_branch_acc"], row["top1"], row["top5"], row["top10"],
        ));
    }
    std::fs::write(rc.out_dir.join("sweep.csv"), csv)?;
    results::write_summary(
        &rc.out_dir,
        &json!({ "experiment": "sweep-subset", "points": table }),
    )?;
    Ok(())
}

fn run_sweep_sharing(rc: &RunConfig) -> Result<()> {
    let kv = &rc.kv;
    let sizes = kv.get_str_list("sweep.sizes")?;
    let levels = kv.get_str_list("sweep.levels")?;
    let (train_raw, test_raw) = load_raw(kv)?;
    let sub = subset_raw(kv, &train_raw)?;
    let train_n = sub.normalize(NORM_MU, NORM_SIGMA)?;
    let test_n = test_raw.normalize(NORM_MU, NORM_SIGMA)?;
    let base_cfg = train_cfg(kv)?;

    let mut table = Vec::new();
    for size_name in &sizes {
        for level_name in &levels {
            eprintln!("[sweep-sharing] size = {size_name}, level = {level_name}");
            let size = SizePreset::parse(size_name)?;
            let level = SharingLevel::parse(level_name)?;
            let spec = ModelSpec {
                variant: Variant::TwoBranch,
                conditional: kv.get_bool("model.conditional")?,
                size,
                sharing_level: level,
                num_classes: train_n.num_classes,
                index_output_size: if kv.get_bool("model.conditional")? {
                    train_n.class_counts.iter().copied().max().unwrap()
                } else {
                    train_n.len()
                },
            };
            let trained = train::train_two_branch(&train_n, Some(&test_n), &spec, &base_cfg, |_| {})?;
            let acct = match &trained.model {
                CnnModel::Two(m) => m.accounting(&trained.store),
                _ => unreachable!(),
            };
            let last_train = trained.records.iter().rev().find(|r| r.split == train::Split::Train);
            let last_test = trained.records.iter().rev().find(|r| r.split == train::Split::Test);
            table.push(json!({
                "size": size_name,
                "level": level_name,
                "sharing_pct": acct.sharing_ratio() * 100.0,
                "total_params": acct.total_unique,
                "cnn1_test_acc": last_test.and_then(|r| r.acc_class),
                "cnn2_memo_train": last_train.and_then(|r| r.acc_index_top1),
                "consistency_top1": last_test.and_then(|r| r.class_consistency_top1),
                "consistency_top5": last_test.and_then(|r| r.class_consistency_top5),
            }));
        }
    }
    let mut csv = String::from(
        "size,level,sharing_pct,total_params,cnn1_test_acc,cnn2_memo_train,consistency_top1,consistency_top5\n",
    );
    for row in &table {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row["size"].as_str().unwrap(),
            row["level"].as_str().unwrap(),
            row["sharing_pct"],
            row["total_params"],
            row["cnn1_test_acc"],
            row["cnn2_memo_train"],
            row["consistency_top1"],
            row["consistency_top5"],
        ));
    }
    std::fs::write(rc.out_dir.join("sharing.csv"), csv)?;
    results::write_summary(
        &rc.out_dir,
        &json!({ "experiment": "sweep-sharing", "points": table }),
    )?;
    Ok(())
}

// ---------------------------------------------------------- robustness

fn run_robustness(rc: &RunConfig) -> Result<()> {
    let kv = &rc.kv;
    let alphas = kv.get_f32_list("robustness.alphas")?;
    let probe_n = kv.get_usize("robustness.probe")?;
    let (train_raw, test_raw) = load_raw(kv)?;
    let sub = subset_raw(kv, &train_raw)?;
    let train_n = sub.normalize(NORM_MU, NORM_SIGMA)?;
    let spec = model_spec(kv, &train_n)?;
    let base_cfg = train_cfg(kv)?;
    let maps = data::build_index_maps(&train_n);

    let probe = train::eval::probe_indices(test_raw.len(), probe_n, base_cfg.seed);
    let mut table = Vec::new();
    for &alpha in &alphas {
        eprintln!("[robustness] training α = {alpha}");
        let cfg = TrainConfig {
            mixing_alpha: alpha,
            ..base_cfg.clone()
        };
        let trained = train::train_single_branch(&train_n, None, &spec, &cfg, |_| {})?;
        let mut store = trained.store;
        let mut distortion_rng = RngStream::new(cfg.seed ^ 0xd15707);

        for d in distort::catalog() {
            // distort raw pixels, then normalize for the model
            let mut batch_rows = Vec::with_capacity(probe.len() * 784);
            for &i in &probe {
                let img = crate::tensor::Tensor::from_vec(&[1, 28, 28], test_raw.image(i).to_vec());
                let out = distort::apply_distortion(&img, &d, &mut distortion_rng)?;
                batch_rows.extend(out.data().iter().map(|&v| (v - NORM_MU) / NORM_SIGMA));
            }
            let mut retrievals = Vec::new();
            let mut true_labels = Vec::new();
            for (ci, chunk) in probe.chunks(256).enumerate() {
                let start = ci * 256 * 784;
                let x = crate::tensor::Tensor::from_vec(
                    &[chunk.len(), 1, 28, 28],
                    batch_rows[start..start + chunk.len() * 784].to_vec(),
                );
                let r = retrieve(trained.model.as_ref(), &mut store, &x, &maps, 10)?;
                for (pos, _) in r.iter().enumerate() {
                    true_labels.push(test_raw.labels[chunk[pos]]);
                }
                retrievals.extend(r);
            }
            let s = retrieval_metrics(&retrievals, &train_n.labels, &true_labels);
            table.push(json!({
                "alpha": alpha,
                "condition": d.name(),
                "top1": s.top1,
                "top5": s.top5_majority,
            }));
        }
    }
    let mut csv = String::from("alpha,condition,top1,top5\n");
    for row in &table {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            row["alpha"],
            row["condition"].as_str().unwrap(),
            row["top1"],
            row["top5"],
        ));
    }
    std::fs::write(rc.out_dir.join("robustness.csv"), csv)?;
    results::write_summary(
        &rc.out_dir,
        &json!({ "experiment": "robustness", "conditions": table }),
    )?;
    Ok(())
}

// ------------------------------------------------- analysis experiments

/// Train a fresh conditional two-branch model, or load `run.checkpoint`.
fn obtain_two_branch(
    rc: &RunConfig,
    train_n: &IndexedDataset,
    test_n: &IndexedDataset,
) -> Result<(CnnModel, crate::nn::ParamStore, Vec<MetricsRecord>)> {
    if let Some(path) = rc.kv.get("run.checkpoint") {
        let ck = load_checkpoint(Path::new(path), Some(&train_n.fingerprint))?;
        let (model, store) = checkpoint::instantiate_cnn(&ck.model, &ck)?;
        return Ok((model, store, Vec::new()));
    }
    let spec = model_spec(&rc.kv, train_n)?;
    let cfg = train_cfg(&rc.kv)?;
    let trained = train::train_two_branch(train_n, Some(test_n), &spec, &cfg, |r| log_record(r))?;
    Ok((trained.model, trained.store, trained.records))
}

fn run_mia(rc: &RunConfig) -> Result<()> {
    let kv = &rc.kv;
    let (train_raw, test_raw) = load_raw(kv)?;
    let sub = subset_raw(kv, &train_raw)?;
    let train_n = sub.normalize(NORM_MU, NORM_SIGMA)?;
    let test_n = test_raw.normalize(NORM_MU, NORM_SIGMA)?;
    let (model, mut store, records) = obtain_two_branch(rc, &train_n, &test_n)?;
    if !records.is_empty() {
        results::write_metrics_csv(&rc.out_dir, &records)?;
    }
    let maps = data::build_index_maps(&train_n);
    let n_samples = kv.get_usize("mia.samples")?;
    let mut rng = RngStream::new(kv.get_u64("seed")? ^ 0x1a1a);
    let report = analysis::membership_inference(
        model.as_ref(),
        &mut store,
        &train_n,
        &test_n,
        &maps,
        n_samples,
        &mut rng,
    )?;

    let mut scores_csv = String::from("branch,kind,member,score\n");
    for set in &report.sets {
        let bname = format!("{:?}", set.branch).to_lowercase();
        let kname = match set.kind {
            analysis::ScoreKind::MaxConfidence => "max_confidence",
            analysis::ScoreKind::NegEntropy => "neg_entropy",
        };
        for &s in &set.member_scores {
            scores_csv.push_str(&format!("{bname},{kname},1,{s}\n"));
        }
        for &s in &set.nonmember_scores {
            scores_csv.push_str(&format!("{bname},{kname},0,{s}\n"));
        }
        let (_, points) = analysis::roc_auc(set)?;
        let mut roc = String::from("fpr,tpr\n");
        for (f, t) in points {
            roc.push_str(&format!("{f},{t}\n"));
        }
        std::fs::write(rc.out_dir.join(format!("roc_{bname}_{kname}.csv")), roc)?;
    }
    std::fs::write(rc.out_dir.join("scores.csv"), scores_csv)?;

    let aucs: Vec<serde_json::Value> = report
        .aucs
        .iter()
        .map(|(b, k, a)| {
            json!({
                "branch": format!("{b:?}").to_lowercase(),
                "kind": match k { analysis::ScoreKind::MaxConfidence => "max_confidence", analysis::ScoreKind::NegEntropy => "neg_entropy" },
                "auc": a,
            })
        })
        .collect();
    results::write_summary(
        &rc.out_dir,
        &json!({
            "experiment": "mia",
            "samples_requested": n_samples,
            "clamped": report.clamped,
            "aucs": aucs,
        }),
    )?;
    Ok(())
}

fn run_debug_entropy(rc: &RunConfig) -> Result<()> {
    let kv = &rc.kv;
    let (train_raw, test_raw) = load_raw(kv)?;
    let sub = subset_raw(kv, &train_raw)?;
    let train_n = sub.normalize(NORM_MU, NORM_SIGMA)?;
    let test_n = test_raw.normalize(NORM_MU, NORM_SIGMA)?;
    let (model, mut store, records) = obtain_two_branch(rc, &train_n, &test_n)?;
    if !records.is_empty() {
        results::write_metrics_csv(&rc.out_dir, &records)?;
    }
    let maps = data::build_index_maps(&train_n);
    let ranking = analysis::rank_anomalies(model.as_ref(), &mut store, &train_n, &maps)?;

    let mut csv = String::from("class,rank,index,source_index,entropy\n");
    let mut extremes = Vec::new();
    for (class, list) in ranking.per_class.iter().enumerate() {
        for (rank, (i, h)) in list.iter().enumerate() {
            csv.push_str(&format!(
                "{class},{rank},{i},{},{h}\n",
                train_n.to_source_index(*i)
            ));
        }
        let (lo, hi) = ranking.extremes(class, 5);
        // export the extreme samples for inspection
        for (pos, (i, _)) in lo.iter().enumerate() {
            results::write_pgm(
                &rc.out_dir.join("artifacts").join(format!("class{class}_anomalous{pos}.pgm")),
                &sub.image(*i)[..784],
                28,
                28,
            )?;
        }
        for (pos, (i, _)) in hi.iter().enumerate() {
            results::write_pgm(
                &rc.out_dir.join("artifacts").join(format!("class{class}_typical{pos}.pgm")),
                &sub.image(*i)[..784],
                28,
                28,
            )?;
        }
        extremes.push(json!({
            "class": class,
            "lowest_entropy": lo.iter().map(|(i, h)| json!({"index": i, "source_index": train_n.to_source_index(*i), "entropy": h})).collect::<Vec<_>>(),
            "highest_entropy": hi.iter().map(|(i, h)| json!({"index": i, "source_index": train_n.to_source_index(*i), "entropy": h})).collect::<Vec<_>>(),
        }));
    }
    std::fs::write(rc.out_dir.join("ranking.csv"), csv)?;
    results::write_summary(
        &rc.out_dir,
        &json!({ "experiment": "debug-entropy", "per_class": extremes }),
    )?;
    Ok(())
}

fn run_attribute(rc: &RunConfig) -> Result<()> {
    let kv = &rc.kv;
    let ck_path = kv.require("run.checkpoint")?;
    let ck = load_checkpoint(Path::new(ck_path), None)?;
    let (model, mut store) = checkpoint::instantiate_cnn(&ck.model, &ck)?;
    let image_path = kv.require("attribute.image")?;
    let mut k = kv.get_usize("attribute.k")?;

    let raw = results::read_image_file(Path::new(image_path))?;
    if raw.dim(1) != 28 || raw.dim(2) != 28 {
        return Err(Error::Data(format!(
            "attribute expects a 28×28 image, got {}×{}",
            raw.dim(1),
            raw.dim(2)
        )));
    }
    let (mu, sigma) = ck.dataset.norm.unwrap_or((NORM_MU, NORM_SIGMA));
    let x = crate::tensor::Tensor::from_vec(
        &[1, 1, 28, 28],
        raw.data().iter().map(|&v| (v - mu) / sigma).collect(),
    );

    let maps = ck.dataset.index_maps();
    let out = model.forward_eval(&mut store, &x)?;
    let predicted_class = out.class_logits.as_ref().map(|cl| argmax(cl.row(0)));

    let (probs, classes_of): (crate::tensor::Tensor, Box<dyn Fn(usize) -> (usize, usize)>) =
        if model.spec().conditional {
            let cls = predicted_class.expect("conditional model has a class head");
            let ky = maps.class_count(cls);
            if k > ky {
                eprintln!("warning: clamping k from {k} to K_ŷ = {ky}");
                k = ky;
            }
            let counts: Vec<usize> = (0..maps.num_classes()).map(|c| maps.class_count(c)).collect();
            let mask = crate::models::validity_mask(&[cls], &counts, out.index_logits.dim(1));
            let mut logits = out.index_logits.clone();
            crate::models::apply_mask_sentinel(&mut logits, &mask);
            let maps2 = maps.clone();
            (
                softmax_probs(&logits, None),
                Box::new(move |local| (cls, maps2.local_to_global(cls, local))),
            )
        } else {
            let maps2 = maps.clone();
            (
                softmax_probs(&out.index_logits, None),
                Box::new(move |global| (maps2.global_to_local(global).0, global)),
            )
        };
    let row = probs.row(0);
    let top = top_k_indices(row, k);
    let entropy = analysis::entropy(row)?;

    let mut hits = Vec::new();
    for &t in &top {
        let (cls, global) = classes_of(t);
        let local = maps.global_to_local(global).1;
        hits.push(json!({
            "class": cls,
            "local_index": local,
            "global_index": global,
            "source_index": ck.dataset.to_source_index(global),
            "confidence": row[t],
        }));
    }
    let report = json!({
        "experiment": "attribute",
        "predicted_class": predicted_class,
        "entropy": entropy,
        "k": k,
        "top": hits,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    results::write_summary(&rc.out_dir, &report)?;
    std::fs::write(
        rc.out_dir.join("attribution.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    Ok(())
}

fn run_generate(rc: &RunConfig) -> Result<()> {
    let kv = &rc.kv;
    let ck_path = kv.require("run.checkpoint")?;
    let ck = load_checkpoint(Path::new(ck_path), None)?;
    let (model, mut store) = checkpoint::instantiate_vae(&ck.model, &ck)?;
    let n = kv.get_usize("generate.n")?;
    let k = kv.get_usize("generate.k")?;
    let class_filter = match kv.get("generate.class") {
        Some("") | None => None,
        Some(v) => Some(v.parse::<usize>().map_err(|_| {
            Error::Config(format!("generate.class: '{v}' is not a class index"))
        })?),
    };
    let maps = ck.dataset.index_maps();
    let mut rng = RngStream::new(kv.get_u64("seed")? ^ 0x6e6e);
    let (images, samples) = vae::generate(&model, &mut store, &mut rng, n, k, class_filter, &maps)?;

    let mut rows = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        results::write_pgm(
            &rc.out_dir.join("artifacts").join(format!("generated_{i:03}.pgm")),
            &images.data()[i * 784..(i + 1) * 784],
            28,
            28,
        )?;
        rows.push(json!({
            "image": format!("artifacts/generated_{i:03}.pgm"),
            "predicted_class": s.predicted_class,
            "top_k": s.top_k.iter().map(|(local, global, conf)| json!({
                "local_index": local,
                "global_index": global,
                "source_index": ck.dataset.to_source_index(*global),
                "confidence": conf,
            })).collect::<Vec<_>>(),
        }));
    }
    let report = json!({
        "experiment": "generate",
        "requested": n,
        "generated": samples.len(),
        "samples": rows,
    });
    std::fs::write(
        rc.out_dir.join("provenance.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    results::write_summary(&rc.out_dir, &report)?;
    Ok(())
}

fn run_export_embeddings(rc: &RunConfig) -> Result<()> {
    let kv = &rc.kv;
    let ck_path = kv.require("run.checkpoint")?;
    let (train_raw, test_raw) = load_raw(kv)?;
    let sub = subset_raw(kv, &train_raw)?;
    let train_n = sub.normalize(NORM_MU, NORM_SIGMA)?;
    let ck = load_checkpoint(Path::new(ck_path), Some(&train_n.fingerprint))?;
    let (model, mut store) = checkpoint::instantiate_cnn(&ck.model, &ck)?;

    let split = kv.require("embed.split")?;
    let ds = match split {
        "train" => &train_n,
        "test" => {
            return {
                let test_n = test_raw.normalize(NORM_MU, NORM_SIGMA)?;
                export_embeddings_for(rc, &model, &mut store, &test_n, &ck)
            }
        }
        v => return Err(Error::Config(format!("embed.split: unknown value '{v}'"))),
    };
    export_embeddings_for(rc, &model, &mut store, ds, &ck)
}

fn export_embeddings_for(
    rc: &RunConfig,
    model: &CnnModel,
    store: &mut crate::nn::ParamStore,
    ds: &IndexedDataset,
    ck: &checkpoint::Checkpoint,
) -> Result<()> {
    let kv = &rc.kv;
    let limit = kv.get_usize("embed.limit")?;
    let indices = train::eval::probe_indices(ds.len(), limit, kv.get_u64("seed")?);
    let emb = analysis::extract_embeddings(model.as_ref(), store, ds, &indices)?;

    // checkpoint-style tensor container
    let mut tensor_store = crate::nn::ParamStore::new();
    let mut rng = RngStream::new(0);
    let id = tensor_store.add("embeddings", emb.shape(), crate::nn::Init::Zeros, false, &mut rng);
    tensor_store.value_mut(id).data_mut().copy_from_slice(emb.data());
    let id = tensor_store.add("indices", &[indices.len()], crate::nn::Init::Zeros, false, &mut rng);
    for (j, &i) in indices.iter().enumerate() {
        tensor_store.value_mut(id).data_mut()[j] = i as f32;
    }
    let id = tensor_store.add("labels", &[indices.len()], crate::nn::Init::Zeros, false, &mut rng);
    for (j, &i) in indices.iter().enumerate() {
        tensor_store.value_mut(id).data_mut()[j] = ds.labels[i] as f32;
    }
    save_checkpoint(
        &rc.out_dir.join("embeddings.pvnt"),
        &ModelHeader::Tensors,
        &ck.dataset,
        &config_map(kv),
        &tensor_store,
    )?;

    let k = kv.get_usize("embed.kmeans_k")?;
    let mut summary = json!({
        "experiment": "export-embeddings",
        "rows": indices.len(),
        "dim": emb.dim(1),
    });
    if k > 0 && k <= emb.dim(0) {
        let mut rng = RngStream::new(kv.get_u64("seed")? ^ 0x6b6d);
        let result = analysis::kmeans(&emb, k, &mut rng, kv.get_usize("embed.kmeans_iters")?, 1e-6)?;
        let nearest = result.nearest_samples(&emb, 8);
        let clusters: Vec<serde_json::Value> = nearest
            .iter()
            .enumerate()
            .map(|(c, rows)| {
                json!({
                    "centroid": c,
                    "nearest_indices": rows.iter().map(|&r| indices[r]).collect::<Vec<_>>(),
                    "nearest_source_indices": rows.iter().map(|&r| ds.to_source_index(indices[r])).collect::<Vec<_>>(),
                })
            })
            .collect();
        summary["kmeans"] = json!({
            "k": k,
            "sse": result.sse_history,
            "clusters": clusters,
        });
        let mut csv = String::from("row,index,assignment\n");
        for (r, &i) in indices.iter().enumerate() {
            csv.push_str(&format!("{r},{i},{}\n", result.assignments[r]));
        }
        std::fs::write(rc.out_dir.join("kmeans_assignments.csv"), csv)?;
    }
    results::write_summary(&rc.out_dir, &summary)?;
    Ok(())
}

fn log_record(r: &MetricsRecord) {
    let fmt = |v: Option<f32>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    eprintln!(
        "epoch {:>3} [{}] loss {} acc_class {} idx@1 {} cfi@1 {} cfi@5 {}",
        r.epoch,
        r.split,
        fmt(r.loss_total),
        fmt(r.acc_class),
        fmt(r.acc_index_top1),
        fmt(r.class_from_index_top1),
        fmt(r.class_from_index_top5),
    );
}
