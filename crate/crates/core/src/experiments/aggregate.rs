use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::Split;
use crate::experiments::metrics::{fmt_sig, MetricsRecord};

/// Metrics of one run, labelled with the group it is averaged in.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub run_id: String,
    pub group: String,
    pub seed: u64,
    pub records: Vec<MetricsRecord>,
}

impl RunMetrics {
    /// Group is the run id without its `-s{seed}` suffix.
    pub fn from_records(records: Vec<MetricsRecord>) -> Option<RunMetrics> {
        let first = records.first()?;
        let run_id = first.run_id.clone();
        let seed = first.seed;
        let suffix = format!("-s{seed}");
        let group = run_id.strip_suffix(&suffix).unwrap_or(&run_id).to_string();
        Some(RunMetrics {
            run_id,
            group,
            seed,
            records,
        })
    }

    pub fn last(&self, split: Split) -> Option<&MetricsRecord> {
        self.records.iter().rev().find(|r| r.split == split)
    }

    pub fn at_epoch(&self, epoch: usize, split: Split) -> Option<&MetricsRecord> {
        self.records.iter().find(|r| r.epoch == epoch && r.split == split)
    }
}

/// Sample mean and standard deviation (`n - 1` denominator). The deviation
/// is `None` for a single value.
pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, None);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, Some((ss / (n - 1) as f64).sqrt()))
}

/// Mean and sample deviation of one metric over the seeds that report it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: Option<f64>,
}

impl Stat {
    fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let (mean, std) = mean_std(values);
        Some(Stat { mean, std })
    }
}

/// One epoch of a group's averaged curves.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub group: String,
    pub epoch: usize,
    pub n: usize,
    pub train_loss: Option<Stat>,
    pub train_accuracy: Option<Stat>,
    pub test_loss: Option<Stat>,
    pub test_accuracy: Option<Stat>,
    pub sharpness: Option<Stat>,
    pub adaptive_sharpness: Option<Stat>,
}

/// Per-group, per-epoch mean and spread across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub curves: Vec<CurvePoint>,
}

pub const AGGREGATE_HEADER: &str = "group,epoch,n,train_loss_mean,train_loss_std,train_accuracy_mean,train_accuracy_std,test_loss_mean,test_loss_std,test_accuracy_mean,test_accuracy_std,sharpness_mean,sharpness_std,adaptive_sharpness_mean,adaptive_sharpness_std";

#[derive(Default)]
struct Cell {
    seeds: Vec<u64>,
    // (seed, value) per metric
    metrics: [Vec<(u64, f64)>; 6],
}

/// Average runs that share a group. Values are reduced in seed order, so the
/// result does not depend on the order of `runs`.
pub fn aggregate(runs: &[RunMetrics]) -> Aggregate {
    let mut cells: BTreeMap<(String, usize), Cell> = BTreeMap::new();
    for run in runs {
        for r in &run.records {
            let cell = cells.entry((run.group.clone(), r.epoch)).or_default();
            if !cell.seeds.contains(&run.seed) {
                cell.seeds.push(run.seed);
            }
            let (loss_i, acc_i) = match r.split {
                Split::Train => (0, 1),
                Split::Test => (2, 3),
            };
            cell.metrics[loss_i].push((run.seed, r.loss));
            cell.metrics[acc_i].push((run.seed, r.accuracy));
            if let Some(v) = r.sharpness {
                cell.metrics[4].push((run.seed, v));
            }
            if let Some(v) = r.adaptive_sharpness {
                cell.metrics[5].push((run.seed, v));
            }
        }
    }
    let curves = cells
        .into_iter()
        .map(|((group, epoch), mut cell)| {
            let mut stats = cell.metrics.iter_mut().map(|vals| {
                vals.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
                Stat::of(&vals.iter().map(|v| v.1).collect::<Vec<_>>())
            });
            CurvePoint {
                group,
                epoch,
                n: cell.seeds.len(),
                train_loss: stats.next().unwrap(),
                train_accuracy: stats.next().unwrap(),
                test_loss: stats.next().unwrap(),
                test_accuracy: stats.next().unwrap(),
                sharpness: stats.next().unwrap(),
                adaptive_sharpness: stats.next().unwrap(),
            }
        })
        .collect();
    Aggregate { curves }
}

impl Aggregate {
    pub fn to_csv(&self) -> String {
        let cols = |s: Option<Stat>| match s {
            Some(s) => format!("{},{}", fmt_sig(s.mean), s.std.map(fmt_sig).unwrap_or_default()),
            None => ",".to_string(),
        };
        let mut out = String::new();
        writeln!(out, "{AGGREGATE_HEADER}").unwrap();
        for c in &self.curves {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                c.group,
                c.epoch,
                c.n,
                cols(c.train_loss),
                cols(c.train_accuracy),
                cols(c.test_loss),
                cols(c.test_accuracy),
                cols(c.sharpness),
                cols(c.adaptive_sharpness),
            )
            .unwrap();
        }
        out
    }

    /// Final-epoch point of each group.
    pub fn finals(&self) -> Vec<&CurvePoint> {
        let mut last: BTreeMap<&str, &CurvePoint> = BTreeMap::new();
        for c in &self.curves {
            let slot = last.entry(&c.group).or_insert(c);
            if c.epoch > slot.epoch {
                *slot = c;
            }
        }
        last.into_values().collect()
    }
}
