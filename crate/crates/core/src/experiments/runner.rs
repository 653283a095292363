use std::path::Path;
use std::time::Instant;

use crate::data::{
    gen_gaussian_blobs, gen_glyphs, gen_spirals, gen_two_moons, load_csv, load_idx, normalize,
    split_train_test, Dataset, Normalization, Split,
};
use crate::error::{Error, Result};
use crate::experiments::config::{DataSource, DatasetSpec, ExperimentConfig, ModelSpec, OptimizerKind, OptimizerSpec};
use crate::experiments::metrics::{write_metrics, MetricsRecord};
use crate::nn::{Checkpoint, CnnOptions, MlpOptions, Model};
use crate::optim::{Asam, AsamConfig, Optimizer, Sam, SamConfig, Schedule, Sgd, SgdConfig};
use crate::sharpness::{estimate_sharpness, ProbeMethod, SharpnessConfig};

const EVAL_CHUNK: usize = 512;

/// Train and test splits after normalization.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
}

impl PreparedData {
    /// Flatten image features to `[N, D]`, for dense models.
    pub fn flattened(&self) -> PreparedData {
        let flat = |ds: &Dataset| {
            let mut out = ds.clone();
            let d: usize = ds.example_shape().iter().product();
            out.features = ds.features.clone().reshape(vec![ds.len(), d]).unwrap();
            out
        };
        PreparedData {
            train: flat(&self.train),
            test: flat(&self.test),
        }
    }
}

pub fn prepare_data(spec: &DatasetSpec) -> Result<PreparedData> {
    let split = |pool: Dataset| split_train_test(&pool, spec.test_fraction, spec.seed);
    let (mut train, mut test) = match &spec.source {
        DataSource::Blobs { n, classes, spread } => {
            split(gen_gaussian_blobs(*n, *classes, *spread, spec.seed)?)?
        }
        DataSource::TwoMoons { n, noise } => split(gen_two_moons(*n, *noise, spec.seed)?)?,
        DataSource::Spirals { n, turns, noise } => split(gen_spirals(*n, *turns, *noise, spec.seed)?)?,
        DataSource::Glyphs {
            n,
            classes,
            size,
            noise,
        } => split(gen_glyphs(*n, *classes, *size, *noise, spec.seed)?)?,
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let pool = load_idx(train_images, train_labels, spec.normalization)?;
            let (train, test) = match (test_images, test_labels) {
                (Some(ti), Some(tl)) => {
                    let mut test = load_idx(ti, tl, spec.normalization)?;
                    test.split = Split::Test;
                    (pool, test)
                }
                _ => split(pool)?,
            };
            if spec.normalization == Normalization::ScaleToUnit {
                // Already divided by 255 on load.
                return Ok(unify_classes(train, test));
            }
            (train, test)
        }
        DataSource::Csv { train, test } => {
            let pool = load_csv(train, Split::Train)?;
            match test {
                Some(path) => (pool, load_csv(path, Split::Test)?),
                None => split(pool)?,
            }
        }
    };
    train.split = Split::Train;
    test.split = Split::Test;
    let (train, test) = normalize(&train, &test, spec.normalization);
    Ok(unify_classes(train, test))
}

fn unify_classes(mut train: Dataset, mut test: Dataset) -> PreparedData {
    let k = train.num_classes.max(test.num_classes);
    train.num_classes = k;
    test.num_classes = k;
    PreparedData { train, test }
}

/// `data` shaped for `spec`: image features are flattened for dense models.
pub fn data_for_model(spec: &ModelSpec, data: &PreparedData) -> PreparedData {
    match spec {
        ModelSpec::Mlp { .. } if data.train.features.ndim() > 2 => data.flattened(),
        _ => data.clone(),
    }
}

/// Model for `spec` whose input matches the (possibly flattened) data.
pub fn build_model(spec: &ModelSpec, data: &PreparedData, seed: u64) -> Result<Model> {
    let example = data.train.example_shape();
    let classes = data.train.num_classes;
    match spec {
        ModelSpec::Mlp {
            widths,
            batchnorm,
            bias,
        } => {
            let d: usize = example.iter().product();
            if widths[0] != d {
                return Err(Error::config(
                    "model.widths",
                    format!("first width {} does not match input dimension {d}", widths[0]),
                ));
            }
            if *widths.last().unwrap() != classes {
                return Err(Error::config(
                    "model.widths",
                    format!("last width {} does not match class count {classes}", widths.last().unwrap()),
                ));
            }
            crate::nn::build_mlp(
                widths,
                MlpOptions {
                    batchnorm: *batchnorm,
                    bias: *bias,
                },
                seed,
            )
        }
        ModelSpec::Cnn {
            channels,
            batchnorm,
            bias,
        } => {
            let &[c, h, w] = example else {
                return Err(Error::config(
                    "model.kind",
                    format!("a cnn needs [C, H, W] examples, dataset has {example:?}"),
                ));
            };
            if h < 4 || w < 4 {
                return Err(Error::config("model.kind", format!("images of {h}x{w} are too small for a cnn")));
            }
            let opts = CnnOptions {
                batchnorm: *batchnorm,
                bias: *bias,
                channels: *channels,
            };
            crate::nn::build_small_cnn(c, h, w, classes, &opts, seed)
        }
    }
}

pub fn build_optimizer(spec: &OptimizerSpec) -> Result<Optimizer> {
    let spec = spec.resolved();
    let base = SgdConfig {
        learning_rate: spec.lr,
        momentum: spec.momentum,
        weight_decay: spec.weight_decay,
    };
    Ok(match spec.kind {
        OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(base)?),
        OptimizerKind::Sam => Optimizer::Sam(Sam::new(SamConfig {
            rho: spec.rho.unwrap(),
            base,
        })?),
        OptimizerKind::Asam => Optimizer::Asam(Asam::new(AsamConfig {
            rho: spec.rho.unwrap(),
            eta: spec.eta.unwrap(),
            base,
        })?),
    })
}

pub fn build_schedule(cfg: &ExperimentConfig) -> Schedule {
    Schedule {
        kind: cfg.schedule.kind,
        base_lr: cfg.optimizer.lr,
        min_lr: cfg.schedule.min_lr,
        total_epochs: cfg.epochs,
    }
}

/// Outcome of training one seed of one configuration.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub run_id: String,
    pub seed: u64,
    /// Resolved single-seed config that reproduces this run.
    pub config: ExperimentConfig,
    pub records: Vec<MetricsRecord>,
    pub model: Model,
    /// Optimizer steps taken.
    pub steps: u64,
}

impl RunResult {
    /// Write `metrics.csv`, `resolved.config` and `final.ckpt` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_metrics(&dir.join("metrics.csv"), &self.records)?;
        self.config.save(&dir.join("resolved.config"))?;
        Checkpoint::from_model(&self.model).write(&dir.join("final.ckpt"))
    }

    pub fn final_record(&self, split: Split) -> &MetricsRecord {
        self.records
            .iter()
            .rev()
            .find(|r| r.split == split)
            .expect("every run records epoch 0")
    }
}

pub fn run_id(cfg: &ExperimentConfig, seed: u64) -> String {
    format!("{}-s{seed}", cfg.name)
}

/// Train one seed of `cfg`, loading its dataset.
pub fn run_training(cfg: &ExperimentConfig, seed: u64) -> Result<RunResult> {
    cfg.validate()?;
    let data = prepare_data(&cfg.dataset)?;
    run_training_on(cfg, seed, &data)
}

/// Train one seed of `cfg` on already prepared data.
///
/// Records train and test loss/accuracy in eval mode at epoch 0 and after
/// every epoch. Epoch `e` trains with the schedule's rate at `e - 1`.
pub fn run_training_on(cfg: &ExperimentConfig, seed: u64, data: &PreparedData) -> Result<RunResult> {
    let data = data_for_model(&cfg.model, data);
    let mut resolved = cfg.resolved();
    resolved.seeds = vec![seed];
    let run_id = run_id(cfg, seed);
    let mut model = build_model(&cfg.model, &data, seed)?;
    let mut optimizer = build_optimizer(&cfg.optimizer)?;
    let schedule = build_schedule(cfg);
    let batches = crate::data::BatchIterator::new(data.train.len(), cfg.batch_size, seed)?;
    let started = Instant::now();
    let probe_data = data.train.head(cfg.sharpness.slice);

    let mut records = Vec::with_capacity(2 * (cfg.epochs + 1));
    let mut steps = 0u64;
    let mut eval = |model: &Model, epoch: usize, lr: f64| -> Result<()> {
        let probe = cfg.sharpness.every > 0 && (epoch.is_multiple_of(cfg.sharpness.every) || epoch == cfg.epochs);
        let wall_ms = cfg
            .record_wall_time
            .then(|| started.elapsed().as_millis() as u64);
        for ds in [&data.train, &data.test] {
            let (loss, accuracy) = model.evaluate(&ds.features, &ds.labels, EVAL_CHUNK)?;
            let (mut sharpness, mut adaptive_sharpness) = (None, None);
            if probe && ds.split == Split::Train {
                let probe_seed = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                let mut sc = SharpnessConfig {
                    rho: cfg.sharpness.rho,
                    probes: cfg.sharpness.probes,
                    adaptive: false,
                    eta: cfg.sharpness.eta,
                    method: ProbeMethod::Combined,
                    seed: probe_seed,
                };
                let x = &probe_data.features;
                let y = &probe_data.labels;
                sharpness = Some(estimate_sharpness(model, x, y, &sc)?.value);
                sc.adaptive = true;
                sc.rho = cfg.sharpness.adaptive_rho;
                adaptive_sharpness = Some(estimate_sharpness(model, x, y, &sc)?.value);
            }
            records.push(MetricsRecord {
                run_id: run_id.clone(),
                seed,
                epoch,
                split: ds.split,
                loss,
                accuracy,
                lr,
                sharpness,
                adaptive_sharpness,
                grad_evals: model.grad_evals(),
                wall_ms,
            });
        }
        Ok(())
    };

    eval(&model, 0, schedule.lr(0)?)?;
    for epoch in 1..=cfg.epochs {
        let lr = schedule.lr(epoch - 1)?;
        optimizer.set_learning_rate(lr);
        for batch in batches.batches(epoch as u64) {
            let (x, y) = data.train.gather(&batch);
            let loss = optimizer.step(&mut model, &x, &y)?;
            if !loss.is_finite() {
                return Err(Error::Runtime(format!(
                    "{run_id}: training loss diverged at epoch {epoch}"
                )));
            }
            steps += 1;
        }
        eval(&model, epoch, lr)?;
    }

    Ok(RunResult {
        run_id,
        seed,
        config: resolved,
        records,
        model,
        steps,
    })
}
