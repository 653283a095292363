use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::Split;
use crate::error::{Error, Result};
use crate::experiments::aggregate::{aggregate, mean_std, Aggregate, RunMetrics};
use crate::experiments::config::{ExperimentConfig, OptimizerKind};
use crate::experiments::metrics::{fmt_sig, read_metrics};
use crate::experiments::runner::{prepare_data, run_training_on, RunResult};
use crate::sharpness::{weight_histogram, Histogram, DEFAULT_BINS};

/// Layer whose weight distribution experiment C reports.
pub const HISTOGRAM_LAYER: &str = "layer0.weight";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    /// SAM vs SGD per seed, optionally at equal gradient budget.
    A,
    /// SGD vs SAM across batch sizes.
    B,
    /// SAM vs ASAM with and without batch norm.
    C,
}

impl FromStr for ExperimentKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "A" | "a" => Ok(ExperimentKind::A),
            "B" | "b" => Ok(ExperimentKind::B),
            "C" | "c" => Ok(ExperimentKind::C),
            other => Err(format!("unknown experiment `{other}` (expected A, B or C)")),
        }
    }
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::A => "A",
            ExperimentKind::B => "B",
            ExperimentKind::C => "C",
        }
    }
}

/// The per-run configs of an experiment. Each gets `seeds = [seed]` and a
/// name equal to its group label.
pub fn plan(kind: ExperimentKind, cfg: &ExperimentConfig) -> Vec<(ExperimentConfig, u64)> {
    let variant = |name: String, method: OptimizerKind| {
        let mut c = cfg.clone();
        c.optimizer = cfg.optimizer.with_kind(method);
        c.name = name;
        c.batch_sizes.clear();
        c
    };
    let mut variants = Vec::new();
    match kind {
        ExperimentKind::A => {
            for m in [OptimizerKind::Sgd, OptimizerKind::Sam] {
                variants.push(variant(format!("A-{}", m.as_str()), m));
            }
        }
        ExperimentKind::B => {
            let sizes = if cfg.batch_sizes.is_empty() {
                vec![cfg.batch_size]
            } else {
                cfg.batch_sizes.clone()
            };
            for m in [OptimizerKind::Sgd, OptimizerKind::Sam] {
                for &bs in &sizes {
                    let mut c = variant(format!("B-{}-bs{bs}", m.as_str()), m);
                    c.batch_size = bs;
                    c.equal_budget = false;
                    variants.push(c);
                }
            }
        }
        ExperimentKind::C => {
            for bn in [false, true] {
                for m in [OptimizerKind::Sam, OptimizerKind::Asam] {
                    let tag = if bn { "bn" } else { "nobn" };
                    let mut c = variant(format!("C-{}-{tag}", m.as_str()), m);
                    c.model = cfg.model.with_batchnorm(bn);
                    c.equal_budget = false;
                    variants.push(c);
                }
            }
        }
    }
    let mut out = Vec::new();
    for v in variants {
        for &seed in &cfg.seeds {
            let mut c = v.clone();
            c.seeds = vec![seed];
            out.push((c.resolved(), seed));
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct SweepOptions {
    /// Worker threads; runs are independent so results do not depend on it.
    pub jobs: usize,
    /// Where run directories and summaries go; nothing is written if `None`.
    pub out_dir: Option<PathBuf>,
    /// Log each finished run to stderr.
    pub verbose: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            jobs: 1,
            out_dir: None,
            verbose: false,
        }
    }
}

/// A finished run together with the config that produced it.
#[derive(Clone, Debug)]
pub struct LoadedRun {
    pub metrics: RunMetrics,
    pub config: ExperimentConfig,
    /// Excess kurtosis of the first layer's weights, when recorded.
    pub kurtosis: Option<f64>,
}

/// One line of an experiment's summary table.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub run_id: String,
    pub group: String,
    pub method: OptimizerKind,
    pub seed: u64,
    pub batch_size: usize,
    pub batchnorm: bool,
    pub epochs: usize,
    pub test_accuracy: f64,
    pub train_loss: f64,
    pub grad_evals: u64,
    /// Epoch and test accuracy at the largest gradient budget not exceeding
    /// the matching SGD run's final budget.
    pub budget: Option<(usize, f64)>,
    pub kurtosis: Option<f64>,
}

pub const SUMMARY_HEADER: &str = "run_id,group,method,seed,batch_size,batchnorm,epochs,test_accuracy,train_loss,grad_evals,budget_epoch,budget_test_accuracy,kurtosis";

impl SummaryRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.group,
            self.method.as_str(),
            self.seed,
            self.batch_size,
            self.batchnorm,
            self.epochs,
            fmt_sig(self.test_accuracy),
            fmt_sig(self.train_loss),
            self.grad_evals,
            self.budget.map(|b| b.0.to_string()).unwrap_or_default(),
            self.budget.map(|b| fmt_sig(b.1)).unwrap_or_default(),
            self.kurtosis.map(fmt_sig).unwrap_or_default(),
        )
    }
}

pub fn summary_rows(runs: &[LoadedRun]) -> Vec<SummaryRow> {
    let mut rows: Vec<SummaryRow> = runs
        .iter()
        .filter_map(|run| {
            let test = run.metrics.last(Split::Test)?;
            let train = run.metrics.last(Split::Train)?;
            let cfg = &run.config;
            let budget = cfg.equal_budget.then(|| budget_point(run, runs)).flatten();
            Some(SummaryRow {
                run_id: run.metrics.run_id.clone(),
                group: run.metrics.group.clone(),
                method: cfg.optimizer.kind,
                seed: run.metrics.seed,
                batch_size: cfg.batch_size,
                batchnorm: cfg.model.batchnorm(),
                epochs: test.epoch,
                test_accuracy: test.accuracy,
                train_loss: train.loss,
                grad_evals: test.grad_evals,
                budget,
                kurtosis: run.kurtosis,
            })
        })
        .collect();
    rows.sort_by(|a, b| {
        (a.batchnorm, a.batch_size, a.seed, a.method, &a.run_id)
            .cmp(&(b.batchnorm, b.batch_size, b.seed, b.method, &b.run_id))
    });
    rows
}

fn budget_point(run: &LoadedRun, all: &[LoadedRun]) -> Option<(usize, f64)> {
    let sgd = all.iter().find(|o| {
        o.config.optimizer.kind == OptimizerKind::Sgd
            && o.metrics.seed == run.metrics.seed
            && o.config.batch_size == run.config.batch_size
    })?;
    let limit = sgd.metrics.last(Split::Test)?.grad_evals;
    run.metrics
        .records
        .iter()
        .filter(|r| r.split == Split::Test && r.grad_evals <= limit)
        .max_by_key(|r| (r.grad_evals, r.epoch))
        .map(|r| (r.epoch, r.accuracy))
}

/// Result of a full experiment sweep.
#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub kind: ExperimentKind,
    pub runs: Vec<LoadedRun>,
    pub rows: Vec<SummaryRow>,
    pub aggregate: Aggregate,
}

impl ExperimentOutcome {
    pub fn rows_for(&self, method: OptimizerKind) -> impl Iterator<Item = &SummaryRow> {
        self.rows.iter().filter(move |r| r.method == method)
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{SUMMARY_HEADER}").unwrap();
        for r in &self.rows {
            writeln!(out, "{}", r.csv_line()).unwrap();
        }
        out
    }

    pub fn markdown(&self) -> String {
        render_markdown(&self.rows)
    }
}

/// Run every configuration of experiment `kind`.
pub fn run_experiment(kind: ExperimentKind, cfg: &ExperimentConfig, opts: &SweepOptions) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let data = prepare_data(&cfg.dataset)?;
    let plan = plan(kind, cfg);
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        cfg.resolved().save(&dir.join("resolved.config"))?;
    }
    let work = |(c, seed): &(ExperimentConfig, u64)| -> Result<LoadedRun> {
        let result = run_training_on(c, *seed, &data)?;
        let kurtosis = finish_run(kind, &result, opts.out_dir.as_deref())?;
        if opts.verbose {
            let last = result.final_record(Split::Test);
            eprintln!(
                "{}: test accuracy {} after {} epochs",
                result.run_id,
                fmt_sig(last.accuracy),
                last.epoch
            );
        }
        Ok(LoadedRun {
            metrics: RunMetrics::from_records(result.records).expect("epoch 0 recorded"),
            config: result.config,
            kurtosis,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::Runtime(format!("thread pool: {e}")))?;
    let runs = pool.install(|| plan.par_iter().map(work).collect::<Result<Vec<_>>>())?;
    let outcome = outcome_from_runs(kind, runs);
    if let Some(dir) = &opts.out_dir {
        write_file(&dir.join("summary.csv"), &outcome.summary_csv())?;
        write_file(&dir.join("aggregate.csv"), &outcome.aggregate.to_csv())?;
    }
    Ok(outcome)
}

fn outcome_from_runs(kind: ExperimentKind, runs: Vec<LoadedRun>) -> ExperimentOutcome {
    let metrics: Vec<RunMetrics> = runs.iter().map(|r| r.metrics.clone()).collect();
    ExperimentOutcome {
        kind,
        rows: summary_rows(&runs),
        aggregate: aggregate(&metrics),
        runs,
    }
}

fn finish_run(kind: ExperimentKind, result: &RunResult, out: Option<&Path>) -> Result<Option<f64>> {
    let histogram = match kind {
        ExperimentKind::C => Some(weight_histogram(&result.model, HISTOGRAM_LAYER, DEFAULT_BINS)?),
        _ => None,
    };
    if let Some(root) = out {
        let dir = root.join(&result.run_id);
        result.write_dir(&dir)?;
        if let Some(h) = &histogram {
            h.write_csv_file(&dir.join("histogram.csv"))?;
        }
    }
    Ok(histogram.map(|h: Histogram| h.excess_kurtosis))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Load every run directory (one holding `metrics.csv`) under `dir`, or
/// `dir` itself when it is a run directory.
pub fn load_runs(dir: &Path) -> Result<Vec<LoadedRun>> {
    let mut dirs = Vec::new();
    if dir.join("metrics.csv").is_file() {
        dirs.push(dir.to_path_buf());
    } else {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.join("metrics.csv").is_file() {
                dirs.push(path);
            }
        }
    }
    if dirs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no run directories with metrics.csv under {}",
            dir.display()
        )));
    }
    dirs.sort();
    let mut runs = Vec::new();
    for d in dirs {
        let records = read_metrics(&d.join("metrics.csv"))?;
        let config = ExperimentConfig::load(&d.join("resolved.config"))?;
        let kurtosis = read_kurtosis(&d.join("histogram.csv"))?;
        if let Some(metrics) = RunMetrics::from_records(records) {
            runs.push(LoadedRun {
                metrics,
                config,
                kurtosis,
            });
        }
    }
    Ok(runs)
}

fn read_kurtosis(path: &Path) -> Result<Option<f64>> {
    if !path.is_file() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .find_map(|l| l.strip_prefix("excess_kurtosis,"))
        .and_then(|rest| rest.split(',').next())
        .and_then(|v| v.parse().ok()))
}

/// Summarize a directory written by `run_experiment` or by a single
/// training run.
pub fn load_outcome(dir: &Path) -> Result<ExperimentOutcome> {
    let runs = load_runs(dir)?;
    let kind = match runs[0].metrics.group.chars().next() {
        Some('B') => ExperimentKind::B,
        Some('C') => ExperimentKind::C,
        _ => ExperimentKind::A,
    };
    Ok(outcome_from_runs(kind, runs))
}

fn pm(mean: f64, std: Option<f64>) -> String {
    match std {
        Some(s) => format!("{:.4} ± {:.4}", mean, s),
        None => format!("{mean:.4}"),
    }
}

pub fn render_markdown(rows: &[SummaryRow]) -> String {
    let budget = rows.iter().any(|r| r.budget.is_some());
    let kurt = rows.iter().any(|r| r.kurtosis.is_some());
    let mut out = String::new();
    let mut header = String::from("| Seed | Method | Batch | BN | Epochs | Test accuracy | Training loss |");
    let mut rule = String::from("|---|---|---|---|---|---|---|");
    if budget {
        header.push_str(" Equal-budget test accuracy (epoch) |");
        rule.push_str("---|");
    }
    if kurt {
        header.push_str(" Weight kurtosis |");
        rule.push_str("---|");
    }
    writeln!(out, "{header}\n{rule}").unwrap();
    for r in rows {
        write!(
            out,
            "| {} | {} | {} | {} | {} | {:.4} | {:.4} |",
            r.seed,
            r.method.as_str().to_uppercase(),
            r.batch_size,
            if r.batchnorm { "on" } else { "off" },
            r.epochs,
            r.test_accuracy,
            r.train_loss
        )
        .unwrap();
        if budget {
            match r.budget {
                Some((e, a)) => write!(out, " {a:.4} ({e}) |").unwrap(),
                None => out.push_str(" |"),
            }
        }
        if kurt {
            match r.kurtosis {
                Some(k) => write!(out, " {k:.3} |").unwrap(),
                None => out.push_str(" |"),
            }
        }
        out.push('\n');
    }

    let mut groups: Vec<&str> = Vec::new();
    for r in rows {
        if !groups.contains(&r.group.as_str()) {
            groups.push(&r.group);
        }
    }
    writeln!(out, "\n| Group | Runs | Test accuracy | Training loss |{}", if kurt { " Weight kurtosis |" } else { "" }).unwrap();
    writeln!(out, "|---|---|---|---|{}", if kurt { "---|" } else { "" }).unwrap();
    for g in groups {
        let members: Vec<&SummaryRow> = rows.iter().filter(|r| r.group == g).collect();
        let acc: Vec<f64> = members.iter().map(|r| r.test_accuracy).collect();
        let loss: Vec<f64> = members.iter().map(|r| r.train_loss).collect();
        let (am, asd) = mean_std(&acc);
        let (lm, lsd) = mean_std(&loss);
        write!(out, "| {g} | {} | {} | {} |", members.len(), pm(am, asd), pm(lm, lsd)).unwrap();
        if kurt {
            let ks: Vec<f64> = members.iter().filter_map(|r| r.kurtosis).collect();
            let (km, ksd) = mean_std(&ks);
            write!(out, " {} |", pm(km, ksd)).unwrap();
        }
        out.push('\n');
    }
    out
}
