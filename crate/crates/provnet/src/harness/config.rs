//! Plain-text run configuration: flat `key = value` lines, `#`
//! comments, dotted keys. Resolution order: built-in defaults → preset
//! table → config file → CLI flags. Unknown keys are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    TrainSingle,
    TrainTwo,
    TrainVae,
    SweepMixing,
    SweepSubset,
    SweepSharing,
    Robustness,
    DebugEntropy,
    Mia,
    Attribute,
    Generate,
    ExportEmbeddings,
}

impl Experiment {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "train-single" => Self::TrainSingle,
            "train-two" => Self::TrainTwo,
            "train-vae" => Self::TrainVae,
            "sweep-mixing" => Self::SweepMixing,
            "sweep-subset" => Self::SweepSubset,
            "sweep-sharing" => Self::SweepSharing,
            "robustness" => Self::Robustness,
            "debug-entropy" => Self::DebugEntropy,
            "mia" => Self::Mia,
            "attribute" => Self::Attribute,
            "generate" => Self::Generate,
            "export-embeddings" => Self::ExportEmbeddings,
            other => {
                return Err(Error::Config(format!(
                    "unknown experiment '{other}' (see `provnet help`)"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::TrainSingle => "train-single",
            Self::TrainTwo => "train-two",
            Self::TrainVae => "train-vae",
            Self::SweepMixing => "sweep-mixing",
            Self::SweepSubset => "sweep-subset",
            Self::SweepSharing => "sweep-sharing",
            Self::Robustness => "robustness",
            Self::DebugEntropy => "debug-entropy",
            Self::Mia => "mia",
            Self::Attribute => "attribute",
            Self::Generate => "generate",
            Self::ExportEmbeddings => "export-embeddings",
        }
    }

    pub const ALL: [Experiment; 12] = [
        Self::TrainSingle,
        Self::TrainTwo,
        Self::TrainVae,
        Self::SweepMixing,
        Self::SweepSubset,
        Self::SweepSharing,
        Self::Robustness,
        Self::DebugEntropy,
        Self::Mia,
        Self::Attribute,
        Self::Generate,
        Self::ExportEmbeddings,
    ];
}

/// Every accepted key with a short description (the documented schema).
pub const SCHEMA: &[(&str, &str)] = &[
    ("preset", "smoke | desk | paper"),
    ("seed", "u64 run seed"),
    ("dataset.name", "mnist | fashion_mnist"),
    ("dataset.dir", "directory with the IDX files (default $PROVNET_DATA_DIR/<name>)"),
    ("dataset.subset_ratio", "stratified training-subset ratio in (0,1]"),
    ("model.variant", "single | two"),
    ("model.conditional", "true | false (two-branch index head conditioning)"),
    ("model.size", "small | medium | large | xlarge | paper_a1 | paper_a2"),
    ("model.sharing_level", "1..4 or I..IV"),
    ("train.epochs", "training epochs"),
    ("train.batch_size", "minibatch size"),
    ("train.eval_every", "evaluate every k epochs (final epoch always)"),
    ("train.probe", "max samples for train-split metrics"),
    ("opt.lr", "AdamW base learning rate"),
    ("opt.weight_decay", "decoupled weight decay"),
    ("opt.beta1", "Adam β1"),
    ("opt.beta2", "Adam β2"),
    ("opt.eps", "Adam ε"),
    ("opt.lr_mult_class", "class-branch lr multiplier"),
    ("opt.lr_mult_index", "index-branch lr multiplier"),
    ("sched.warmup_epochs", "linear warmup epochs"),
    ("sched.decay_step", "step-decay interval in epochs (0 = none)"),
    ("sched.gamma", "step-decay factor"),
    ("loss.w_class", "class-loss weight (λ_class)"),
    ("loss.w_index", "index-loss weight (λ_index)"),
    ("loss.smoothing", "label-smoothing ε for index losses"),
    ("mixing.alpha", "single-branch mixing α in [0,1]"),
    ("mixing.resample", "every_epoch | never"),
    ("vae.latent_dim", "VAE latent dimensionality"),
    ("vae.lambda_gen", "VAE generative loss weight"),
    ("vae.lambda_cls", "VAE discriminative loss weight"),
    ("mia.samples", "membership-inference samples per side"),
    ("sweep.alphas", "comma list of mixing α values"),
    ("sweep.ratios", "comma list of subset ratios"),
    ("sweep.sizes", "comma list of model sizes"),
    ("sweep.levels", "comma list of sharing levels"),
    ("robustness.alphas", "comma list of mixing α values"),
    ("robustness.probe", "test samples per distortion condition"),
    ("run.checkpoint", "checkpoint to analyze instead of training fresh"),
    ("attribute.image", "28×28 input image (PGM P5 or IDX)"),
    ("attribute.k", "how many provenance indices to report"),
    ("generate.n", "number of samples to generate"),
    ("generate.k", "top-k provenance per sample"),
    ("generate.class", "optional class filter"),
    ("embed.split", "train | test"),
    ("embed.limit", "max samples to embed"),
    ("embed.kmeans_k", "k for k-means over embeddings (0 = skip)"),
    ("embed.kmeans_iters", "max Lloyd iterations"),
    ("out.checkpoint", "write checkpoint.pvnt after training (true/false)"),
];

fn known_key(k: &str) -> bool {
    SCHEMA.iter().any(|(s, _)| *s == k)
}

/// Flat key→value map with typed accessors.
#[derive(Debug, Clone, Default)]
pub struct KvConfig {
    map: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !known_key(key) {
            return Err(Error::Config(format!("unknown config key '{key}'")));
        }
        self.map.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Set without overwriting (used by preset/default layering).
    fn set_default(&mut self, key: &str, value: &str) {
        debug_assert!(known_key(key), "schema miss: {key}");
        self.map.entry(key.to_string()).or_insert_with(|| value.to_string());
    }

    pub fn parse_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected 'key = value'", lineno + 1))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("missing required key '{key}'")))
    }

    pub fn get_f32(&self, key: &str) -> Result<f32> {
        let v = self.require(key)?;
        v.parse()
            .map_err(|_| Error::Config(format!("key '{key}': '{v}' is not a number")))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        let v = self.require(key)?;
        v.parse()
            .map_err(|_| Error::Config(format!("key '{key}': '{v}' is not an integer")))
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        let v = self.require(key)?;
        v.parse()
            .map_err(|_| Error::Config(format!("key '{key}': '{v}' is not an integer")))
    }

    pub fn get_bool(&self, key: &str) -> Result<bool> {
        match self.require(key)? {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(Error::Config(format!("key '{key}': '{v}' is not a bool"))),
        }
    }

    pub fn get_f32_list(&self, key: &str) -> Result<Vec<f32>> {
        let v = self.require(key)?;
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("key '{key}': '{s}' is not a number")))
            })
            .collect()
    }

    pub fn get_str_list(&self, key: &str) -> Result<Vec<String>> {
        Ok(self
            .require(key)?
            .split(',')
            .map(|s| s.trim().to_string())
            .collect())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &String)> {
        self.map.iter()
    }

    /// Sorted `key = value` lines; parseable by [`parse_text`], so the
    /// snapshot reruns a config bit-identically.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.map {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub kv: KvConfig,
    pub out_dir: PathBuf,
}

/// Layer in the defaults for `experiment` under `preset`.
pub fn apply_defaults(kv: &mut KvConfig, experiment: Experiment) -> Result<()> {
    kv.set_default("preset", "smoke");
    let preset = kv.get("preset").unwrap_or("smoke").to_string();
    if !matches!(preset.as_str(), "smoke" | "desk" | "paper") {
        return Err(Error::Config(format!("unknown preset '{preset}'")));
    }

    // universal defaults (Appx A.1 optimizer/schedule)
    kv.set_default("seed", "42");
    kv.set_default("dataset.name", "mnist");
    kv.set_default("train.batch_size", "128");
    kv.set_default("train.eval_every", "1");
    kv.set_default("train.probe", "10000");
    kv.set_default("opt.lr", "0.002");
    kv.set_default("opt.weight_decay", "0.00002");
    kv.set_default("opt.beta1", "0.9");
    kv.set_default("opt.beta2", "0.999");
    kv.set_default("opt.eps", "0.00000001");
    kv.set_default("opt.lr_mult_class", "1");
    kv.set_default("opt.lr_mult_index", "1");
    kv.set_default("sched.warmup_epochs", "3");
    kv.set_default("sched.decay_step", "8");
    kv.set_default("sched.gamma", "0.6");
    kv.set_default("loss.smoothing", "0.05");
    kv.set_default("mixing.alpha", "0");
    kv.set_default("mixing.resample", "every_epoch");
    kv.set_default("vae.latent_dim", "128");
    kv.set_default("vae.lambda_gen", "0.6");
    kv.set_default("vae.lambda_cls", "0.4");
    kv.set_default("mia.samples", "5000");
    kv.set_default("out.checkpoint", "true");

    // scale presets: smoke ≈ 1k samples/small, desk = 10%/medium,
    // paper = full data at the published sizes
    let (ratio, size, epochs_single, epochs_two) = match preset.as_str() {
        "smoke" => ("0.0166667", "small", "30", "30"),
        "desk" => ("0.1", "medium", "40", "40"),
        _ => ("1.0", "paper", "80", "100"),
    };
    let sized = |s: &str, single: bool| -> String {
        if s == "paper" {
            if single { "paper_a1".into() } else { "paper_a2".into() }
        } else {
            s.into()
        }
    };

    match experiment {
        Experiment::TrainSingle | Experiment::SweepMixing | Experiment::Robustness => {
            kv.set_default("model.variant", "single");
            kv.set_default("model.size", &sized(size, true));
            kv.set_default("model.sharing_level", "4");
            kv.set_default("model.conditional", "false");
            kv.set_default("dataset.subset_ratio", ratio);
            kv.set_default("train.epochs", epochs_single);
        }
        Experiment::TrainTwo | Experiment::SweepSubset | Experiment::SweepSharing => {
            kv.set_default("model.variant", "two");
            kv.set_default("model.size", &sized(size, false));
            kv.set_default("model.conditional", match experiment {
                Experiment::SweepSharing => "false",
                _ => "true",
            });
            kv.set_default("model.sharing_level", match experiment {
                Experiment::SweepSubset => "1",
                _ => "4",
            });
            kv.set_default("dataset.subset_ratio", ratio);
            kv.set_default("train.epochs", epochs_two);
            if preset == "desk" {
                kv.set_default("train.eval_every", "4");
            }
        }
        Experiment::TrainVae | Experiment::Generate => {
            kv.set_default("model.variant", "two");
            kv.set_default("model.conditional", "true");
            kv.set_default("model.size", "small");
            kv.set_default("model.sharing_level", "4");
            // 1/30 of MNIST ≈ 2k samples at smoke/desk scale
            kv.set_default(
                "dataset.subset_ratio",
                if preset == "paper" { "1.0" } else { "0.0333334" },
            );
            kv.set_default("train.epochs", if preset == "paper" { "70" } else { "30" });
            kv.set_default("opt.lr", "0.001");
            kv.set_default("opt.weight_decay", "0");
            kv.set_default("sched.warmup_epochs", "0");
            kv.set_default("sched.decay_step", "0");
            kv.set_default("sched.gamma", "1");
        }
        Experiment::Mia | Experiment::DebugEntropy => {
            kv.set_default("model.variant", "two");
            kv.set_default("model.conditional", "true");
            kv.set_default("model.size", &sized(size, false));
            kv.set_default("model.sharing_level", "4");
            kv.set_default("dataset.subset_ratio", ratio);
            // Appx A.7: 40 epochs
            kv.set_default("train.epochs", "40");
        }
        Experiment::Attribute | Experiment::ExportEmbeddings => {
            kv.set_default("model.variant", "two");
            kv.set_default("model.size", size);
            kv.set_default("model.conditional", "true");
            kv.set_default("model.sharing_level", "4");
            kv.set_default("dataset.subset_ratio", ratio);
            kv.set_default("train.epochs", epochs_two);
        }
    }

    // loss weights: 1/1 for the main-text experiments; membership
    // inference and the sharing grid use the A.2/A.7 0.3/0.7 weighting
    if matches!(experiment, Experiment::Mia | Experiment::SweepSharing) {
        kv.set_default("loss.w_class", "0.3");
        kv.set_default("loss.w_index", "0.7");
    } else {
        kv.set_default("loss.w_class", "1");
        kv.set_default("loss.w_index", "1");
    }

    // experiment-specific lists and knobs
    kv.set_default("sweep.alphas", "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0");
    kv.set_default("sweep.ratios", "0.1,0.3,0.5,0.7,0.9");
    kv.set_default("sweep.sizes", "small");
    kv.set_default("sweep.levels", "1,2,3,4");
    kv.set_default("robustness.alphas", "0.5");
    kv.set_default("robustness.probe", "2000");
    kv.set_default("attribute.k", "5");
    kv.set_default("generate.n", "16");
    kv.set_default("generate.k", "5");
    kv.set_default("embed.split", "train");
    kv.set_default("embed.limit", "2048");
    kv.set_default("embed.kmeans_k", "10");
    kv.set_default("embed.kmeans_iters", "100");
    Ok(())
}

/// Default dataset directory: dataset.dir, else $PROVNET_DATA_DIR/<name>,
/// else $PROVNET_DATA_DIR itself if it directly holds the files.
pub fn dataset_dir(kv: &KvConfig) -> Result<PathBuf> {
    if let Some(dir) = kv.get("dataset.dir") {
        return Ok(PathBuf::from(dir));
    }
    let root = std::env::var("PROVNET_DATA_DIR").map_err(|_| {
        Error::Config("set dataset.dir or the PROVNET_DATA_DIR environment variable".into())
    })?;
    let name = kv.get("dataset.name").unwrap_or("mnist");
    let sub = Path::new(&root).join(name);
    if sub.join("train-images-idx3-ubyte").exists() {
        Ok(sub)
    } else {
        Ok(PathBuf::from(root))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_rejects_unknown_keys() {
        let mut kv = KvConfig::default();
        assert!(kv.parse_text("train.epochs = 3\n# comment\nloss.w_index = 0.7").is_ok());
        assert!(kv.parse_text("no.such.key = 1").is_err());
        assert!(kv.parse_text("garbage line").is_err());
    }

    #[test]
    fn snapshot_roundtrip() {
        let mut kv = KvConfig::default();
        apply_defaults(&mut kv, Experiment::TrainSingle).unwrap();
        let snap = kv.snapshot();
        let mut kv2 = KvConfig::default();
        kv2.parse_text(&snap).unwrap();
        assert_eq!(kv2.snapshot(), snap);
    }

    #[test]
    fn preset_defaults_do_not_override_user_values() {
        let mut kv = KvConfig::default();
        kv.set("train.epochs", "3").unwrap();
        apply_defaults(&mut kv, Experiment::TrainTwo).unwrap();
        assert_eq!(kv.get("train.epochs"), Some("3"));
        assert_eq!(kv.get("model.conditional"), Some("true"));
    }

    #[test]
    fn mia_preset_uses_a7_weights() {
        let mut kv = KvConfig::default();
        apply_defaults(&mut kv, Experiment::Mia).unwrap();
        assert_eq!(kv.get("loss.w_class"), Some("0.3"));
        assert_eq!(kv.get("loss.w_index"), Some("0.7"));
        assert_eq!(kv.get("train.epochs"), Some("40"));
        assert_eq!(kv.get("mia.samples"), Some("5000"));
    }
}
