//! Experiment configuration, read from and written to TOML.
//!
//! Loaded configs may omit most fields; [`ExperimentConfig::resolved`]
//! expands every default so a run's output directory records exactly what
//! was executed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::optim::{
    ScheduleKind, DEFAULT_ASAM_ETA, DEFAULT_ASAM_RHO, DEFAULT_SAM_RHO,
};
use crate::sharpness::{DEFAULT_PROBES, DEFAULT_SLICE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Sam,
    Asam,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Sam => "sam",
            OptimizerKind::Asam => "asam",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Full width list including input dimension and class count.
    Mlp {
        widths: Vec<usize>,
        #[serde(default)]
        batchnorm: bool,
        #[serde(default = "yes")]
        bias: bool,
    },
    /// Two conv blocks plus a dense head; input shape and class count come
    /// from the dataset.
    Cnn {
        #[serde(default = "default_channels")]
        channels: [usize; 2],
        #[serde(default)]
        batchnorm: bool,
        #[serde(default = "yes")]
        bias: bool,
    },
}

impl ModelSpec {
    pub fn batchnorm(&self) -> bool {
        match self {
            ModelSpec::Mlp { batchnorm, .. } | ModelSpec::Cnn { batchnorm, .. } => *batchnorm,
        }
    }

    pub fn with_batchnorm(&self, on: bool) -> ModelSpec {
        let mut out = self.clone();
        match &mut out {
            ModelSpec::Mlp { batchnorm, .. } | ModelSpec::Cnn { batchnorm, .. } => *batchnorm = on,
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Blobs {
        n: usize,
        classes: usize,
        spread: f64,
    },
    TwoMoons {
        n: usize,
        noise: f64,
    },
    Spirals {
        n: usize,
        turns: f64,
        noise: f64,
    },
    Glyphs {
        n: usize,
        classes: usize,
        size: usize,
        noise: f64,
    },
    /// IDX image/label files. Without a test pair the train pair is split.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_images: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_labels: Option<PathBuf>,
    },
    /// CSV files with a `label` column.
    Csv {
        train: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test: Option<PathBuf>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub source: DataSource,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Seed of the data generator and train/test split; independent of the
    /// run seeds, so every run sees the same data.
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Perturbation radius; SAM and ASAM only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    /// Rescaling stabilizer; ASAM only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
}

impl OptimizerSpec {
    /// Same hyperparameters under another optimizer kind. `rho`/`eta`
    /// carry over only when the kind is unchanged; otherwise the new kind's
    /// defaults apply.
    pub fn with_kind(&self, kind: OptimizerKind) -> OptimizerSpec {
        let mut out = self.clone();
        if kind != self.kind {
            out.kind = kind;
            out.rho = None;
            out.eta = None;
        }
        out.resolved()
    }

    pub fn resolved(&self) -> OptimizerSpec {
        let mut out = self.clone();
        match self.kind {
            OptimizerKind::Sgd => {
                out.rho = None;
                out.eta = None;
            }
            OptimizerKind::Sam => {
                out.rho = Some(self.rho.unwrap_or(DEFAULT_SAM_RHO));
                out.eta = None;
            }
            OptimizerKind::Asam => {
                out.rho = Some(self.rho.unwrap_or(DEFAULT_ASAM_RHO));
                out.eta = Some(self.eta.unwrap_or(DEFAULT_ASAM_ETA));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    #[serde(default = "constant_schedule")]
    pub kind: ScheduleKind,
    #[serde(default)]
    pub min_lr: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            kind: ScheduleKind::Constant,
            min_lr: 0.0,
        }
    }
}

/// Per-epoch sharpness probing. `every = 0` disables it; otherwise both
/// plain and adaptive sharpness are measured on the first `slice` training
/// examples at every `every`-th epoch and at the final epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharpnessSpec {
    #[serde(default)]
    pub every: usize,
    #[serde(default = "default_sam_rho")]
    pub rho: f64,
    #[serde(default = "default_asam_rho")]
    pub adaptive_rho: f64,
    #[serde(default = "default_asam_eta")]
    pub eta: f64,
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default = "default_slice")]
    pub slice: usize,
}

impl Default for SharpnessSpec {
    fn default() -> Self {
        SharpnessSpec {
            every: 0,
            rho: DEFAULT_SAM_RHO,
            adaptive_rho: DEFAULT_ASAM_RHO,
            eta: DEFAULT_ASAM_ETA,
            probes: DEFAULT_PROBES,
            slice: DEFAULT_SLICE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Run ids are `{name}-s{seed}`.
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Compare SAM at half the gradient budget of SGD (experiment A).
    #[serde(default)]
    pub equal_budget: bool,
    /// Batch sizes swept by experiment B.
    #[serde(default)]
    pub batch_sizes: Vec<usize>,
    /// Fill the `wall_ms` metrics column. Off by default because timings
    /// make metrics files machine dependent.
    #[serde(default)]
    pub record_wall_time: bool,
    pub model: ModelSpec,
    pub dataset: DatasetSpec,
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub sharpness: SharpnessSpec,
}

fn yes() -> bool {
    true
}
fn default_channels() -> [usize; 2] {
    [8, 16]
}
fn default_test_fraction() -> f64 {
    0.5
}
fn constant_schedule() -> ScheduleKind {
    ScheduleKind::Constant
}
fn default_sam_rho() -> f64 {
    DEFAULT_SAM_RHO
}
fn default_asam_rho() -> f64 {
    DEFAULT_ASAM_RHO
}
fn default_asam_eta() -> f64 {
    DEFAULT_ASAM_ETA
}
fn default_probes() -> usize {
    DEFAULT_PROBES
}
fn default_slice() -> usize {
    DEFAULT_SLICE
}
fn default_name() -> String {
    "run".into()
}
fn default_epochs() -> usize {
    100
}
fn default_batch_size() -> usize {
    128
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn ensure(cond: bool, path: &str, msg: impl Into<String>) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::config(path, msg))
    }
}

fn non_negative(v: f64) -> bool {
    v >= 0.0 && v.is_finite()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let path = e
                .span()
                .map(|s| {
                    let line = text[..s.start].lines().count().max(1);
                    format!("line {line}")
                })
                .unwrap_or_else(|| "<config>".into());
            Error::config(path, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config { path: field, msg } => {
                Error::config(format!("{}: {field}", path.display()), msg)
            }
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    /// Copy with every optional field filled in.
    pub fn resolved(&self) -> ExperimentConfig {
        let mut out = self.clone();
        out.optimizer = self.optimizer.resolved();
        out
    }

    pub fn validate(&self) -> Result<()> {
        ensure(!self.name.is_empty(), "name", "must not be empty")?;
        ensure(
            self.name.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)),
            "name",
            "only letters, digits, '-', '_' and '.' are allowed",
        )?;
        ensure(self.batch_size > 0, "batch_size", "must be positive")?;
        ensure(!self.seeds.is_empty(), "seeds", "need at least one seed")?;
        for (i, b) in self.batch_sizes.iter().enumerate() {
            ensure(*b > 0, &format!("batch_sizes[{i}]"), "must be positive")?;
        }

        match &self.model {
            ModelSpec::Mlp { widths, .. } => {
                ensure(widths.len() >= 2, "model.widths", "need at least 2 entries")?;
                ensure(!widths.contains(&0), "model.widths", "widths must be positive")?;
            }
            ModelSpec::Cnn { channels, .. } => {
                ensure(!channels.contains(&0), "model.channels", "must be positive")?;
            }
        }

        let d = &self.dataset;
        ensure(
            d.test_fraction > 0.0 && d.test_fraction < 1.0,
            "dataset.test_fraction",
            "must be in (0, 1)",
        )?;
        let (n, classes) = match &d.source {
            DataSource::Blobs { n, classes, spread } => {
                ensure(non_negative(*spread), "dataset.spread", "must be non-negative")?;
                (*n, *classes)
            }
            DataSource::TwoMoons { n, noise } => {
                ensure(non_negative(*noise), "dataset.noise", "must be non-negative")?;
                (*n, 2)
            }
            DataSource::Spirals { n, turns, noise } => {
                ensure(*turns > 0.0, "dataset.turns", "must be positive")?;
                ensure(non_negative(*noise), "dataset.noise", "must be non-negative")?;
                (*n, 2)
            }
            DataSource::Glyphs {
                n,
                classes,
                size,
                noise,
            } => {
                ensure(*size >= 4, "dataset.size", "must be at least 4")?;
                ensure(non_negative(*noise), "dataset.noise", "must be non-negative")?;
                (*n, *classes)
            }
            DataSource::Idx {
                test_images,
                test_labels,
                ..
            } => {
                ensure(
                    test_images.is_some() == test_labels.is_some(),
                    "dataset.test_images",
                    "test_images and test_labels go together",
                )?;
                (2, 1)
            }
            DataSource::Csv { .. } => (2, 1),
        };
        ensure(classes >= 1, "dataset.classes", "must be positive")?;
        ensure(n >= 2 * classes, "dataset.n", format!("must be at least 2 * classes = {}", 2 * classes))?;

        let o = &self.optimizer;
        ensure(o.lr > 0.0 && o.lr.is_finite(), "optimizer.lr", "must be positive")?;
        ensure((0.0..1.0).contains(&o.momentum), "optimizer.momentum", "must be in [0, 1)")?;
        ensure(non_negative(o.weight_decay), "optimizer.weight_decay", "must be non-negative")?;
        if let Some(rho) = o.rho {
            ensure(non_negative(rho), "optimizer.rho", "must be non-negative")?;
        }
        if let Some(eta) = o.eta {
            ensure(non_negative(eta), "optimizer.eta", "must be non-negative")?;
        }

        let s = &self.schedule;
        ensure(non_negative(s.min_lr), "schedule.min_lr", "must be non-negative")?;
        ensure(s.min_lr <= o.lr, "schedule.min_lr", "must not exceed optimizer.lr")?;

        let p = &self.sharpness;
        ensure(non_negative(p.rho), "sharpness.rho", "must be non-negative")?;
        ensure(non_negative(p.adaptive_rho), "sharpness.adaptive_rho", "must be non-negative")?;
        ensure(non_negative(p.eta), "sharpness.eta", "must be non-negative")?;
        ensure(p.probes >= 1, "sharpness.probes", "must be at least 1")?;
        ensure(p.slice >= 1, "sharpness.slice", "must be at least 1")?;
        Ok(())
    }

    /// Experiment A: SAM vs SGD on noisy blobs, `[2, 64, 64, 3]` MLP,
    /// 100 epochs, lr 0.01, no momentum, batch 128, seeds 20/30/40.
    pub fn preset_a() -> Self {
        ExperimentConfig {
            name: "experiment-a".into(),
            epochs: 100,
            batch_size: 128,
            seeds: vec![20, 30, 40],
            equal_budget: true,
            batch_sizes: vec![],
            record_wall_time: false,
            model: ModelSpec::Mlp {
                widths: vec![2, 64, 64, 3],
                batchnorm: false,
                bias: true,
            },
            dataset: DatasetSpec {
                source: DataSource::Blobs {
                    n: 2000,
                    classes: 3,
                    spread: BLOBS_SPREAD,
                },
                normalization: Normalization::None,
                test_fraction: 0.5,
                seed: 0,
            },
            optimizer: OptimizerSpec {
                kind: OptimizerKind::Sam,
                lr: 0.01,
                momentum: 0.0,
                weight_decay: 0.0,
                rho: Some(DEFAULT_SAM_RHO),
                eta: None,
            },
            schedule: ScheduleSpec::default(),
            sharpness: SharpnessSpec::default(),
        }
    }

    /// Experiment B: experiment A's setup swept over batch sizes 32/64/128.
    pub fn preset_b() -> Self {
        ExperimentConfig {
            name: "experiment-b".into(),
            equal_budget: false,
            batch_sizes: vec![32, 64, 128],
            ..Self::preset_a()
        }
    }

    /// Experiment C: SAM vs ASAM on glyph images with a small CNN, with and
    /// without batch norm; lr 0.01, batch 128, momentum 0.9, weight decay
    /// 5e-4, cosine schedule, 200 epochs, seeds 1/2/3.
    pub fn preset_c() -> Self {
        ExperimentConfig {
            name: "experiment-c".into(),
            epochs: 200,
            batch_size: 128,
            seeds: vec![1, 2, 3],
            equal_budget: false,
            batch_sizes: vec![],
            record_wall_time: false,
            model: ModelSpec::Cnn {
                channels: [8, 16],
                batchnorm: false,
                bias: true,
            },
            dataset: DatasetSpec {
                source: DataSource::Glyphs {
                    n: 1024,
                    classes: 4,
                    size: 8,
                    noise: GLYPH_NOISE,
                },
                normalization: Normalization::None,
                test_fraction: 0.5,
                seed: 0,
            },
            optimizer: OptimizerSpec {
                kind: OptimizerKind::Asam,
                lr: 0.01,
                momentum: 0.9,
                weight_decay: 5e-4,
                rho: Some(DEFAULT_ASAM_RHO),
                eta: Some(DEFAULT_ASAM_ETA),
            },
            schedule: ScheduleSpec {
                kind: ScheduleKind::Cosine,
                min_lr: 0.0,
            },
            sharpness: SharpnessSpec::default(),
        }
    }
}

/// Blob std for experiments A/B: three unit-circle centres at this spread
/// give a nearest-centre (Bayes) accuracy of about 0.77.
pub const BLOBS_SPREAD: f64 = 0.8;
/// Pixel noise for the experiment C glyph images.
pub const GLYPH_NOISE: f64 = 0.6;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for cfg in [
            ExperimentConfig::preset_a(),
            ExperimentConfig::preset_b(),
            ExperimentConfig::preset_c(),
        ] {
            cfg.validate().unwrap();
            let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let text = r#"
            [model]
            kind = "mlp"
            widths = [2, 8, 2]

            [dataset]
            kind = "two_moons"
            n = 100
            noise = 0.1

            [optimizer]
            kind = "sam"
            lr = 0.05
        "#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.epochs, 100);
        assert_eq!(cfg.seeds, vec![0]);
        assert_eq!(cfg.optimizer.rho, None);
        let resolved = cfg.resolved();
        assert_eq!(resolved.optimizer.rho, Some(DEFAULT_SAM_RHO));
        assert!(resolved.to_toml().contains("rho = 0.05"));
    }

    #[test]
    fn validation_names_the_field() {
        let mut cfg = ExperimentConfig::preset_a();
        cfg.optimizer.lr = 0.0;
        let err = cfg.validate().unwrap_err();
        assert!(matches!(&err, Error::Config { path, .. } if path == "optimizer.lr"), "{err}");
        let mut cfg = ExperimentConfig::preset_a();
        cfg.optimizer.momentum = 1.5;
        assert!(matches!(cfg.validate(), Err(Error::Config { path, .. }) if path == "optimizer.momentum"));
        let mut cfg = ExperimentConfig::preset_a();
        cfg.seeds.clear();
        assert!(matches!(cfg.validate(), Err(Error::Config { path, .. }) if path == "seeds"));
    }

    #[test]
    fn unknown_fields_rejected() {
        let mut text = ExperimentConfig::preset_a().to_toml();
        text.insert_str(0, "bogus = 3\n");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config { .. })));
    }

    #[test]
    fn kind_switch_resets_radius() {
        let spec = ExperimentConfig::preset_c().optimizer;
        let sam = spec.with_kind(OptimizerKind::Sam);
        assert_eq!(sam.rho, Some(DEFAULT_SAM_RHO));
        assert_eq!(sam.eta, None);
        let asam = spec.with_kind(OptimizerKind::Asam);
        assert_eq!(asam.rho, Some(DEFAULT_ASAM_RHO));
        let sgd = spec.with_kind(OptimizerKind::Sgd);
        assert_eq!((sgd.rho, sgd.eta), (None, None));
    }

    #[test]
    fn shipped_configs_match_presets() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for (file, preset) in [
            ("experiment-a.toml", ExperimentConfig::preset_a()),
            ("experiment-b.toml", ExperimentConfig::preset_b()),
            ("experiment-c.toml", ExperimentConfig::preset_c()),
        ] {
            assert_eq!(ExperimentConfig::load(&dir.join(file)).unwrap(), preset, "{file}");
        }
        ExperimentConfig::load(&dir.join("quick.toml")).unwrap();
    }
}
