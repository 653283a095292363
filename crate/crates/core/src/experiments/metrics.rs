use std::fmt::Write as _;
use std::path::Path;

use crate::data::Split;
use crate::error::{Error, Result};

pub const METRICS_HEADER: &str =
    "run_id,seed,epoch,split,loss,accuracy,lr,sharpness,adaptive_sharpness,grad_evals,wall_ms";

/// Shortest `%.9g`-style rendering: nine significant digits, trailing zeros
/// trimmed, scientific notation outside `[1e-5, 1e9)`.
pub fn fmt_sig(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf" } else { "-inf" }.into();
    }
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..9).contains(&exp) {
        return format!("{}e{exp}", trim_zeros(mantissa));
    }
    let decimals = (8 - exp) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}

/// One row of a run's metrics file. Epoch 0 is the untrained model.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub seed: u64,
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
    /// Learning rate used during this epoch.
    pub lr: f64,
    pub sharpness: Option<f64>,
    pub adaptive_sharpness: Option<f64>,
    /// Cumulative forward+backward passes up to the end of this epoch.
    pub grad_evals: u64,
    pub wall_ms: Option<u64>,
}

impl MetricsRecord {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(fmt_sig).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.seed,
            self.epoch,
            split_name(self.split),
            fmt_sig(self.loss),
            fmt_sig(self.accuracy),
            fmt_sig(self.lr),
            opt(self.sharpness),
            opt(self.adaptive_sharpness),
            self.grad_evals,
            self.wall_ms.map(|w| w.to_string()).unwrap_or_default(),
        )
    }

    fn parse_line(line: &str, path: &Path, lineno: usize) -> Result<Self> {
        let bad = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            msg: format!("line {lineno}: {msg}"),
        };
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 11 {
            return Err(bad(format!("expected 11 columns, found {}", cols.len())));
        }
        let float = |s: &str, what: &str| -> Result<f64> {
            s.parse().map_err(|_| bad(format!("bad {what} `{s}`")))
        };
        let opt_float = |s: &str, what: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                float(s, what).map(Some)
            }
        };
        let split = match cols[3] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(bad(format!("bad split `{other}`"))),
        };
        Ok(MetricsRecord {
            run_id: cols[0].to_string(),
            seed: cols[1].parse().map_err(|_| bad(format!("bad seed `{}`", cols[1])))?,
            epoch: cols[2].parse().map_err(|_| bad(format!("bad epoch `{}`", cols[2])))?,
            split,
            loss: float(cols[4], "loss")?,
            accuracy: float(cols[5], "accuracy")?,
            lr: float(cols[6], "lr")?,
            sharpness: opt_float(cols[7], "sharpness")?,
            adaptive_sharpness: opt_float(cols[8], "adaptive_sharpness")?,
            grad_evals: cols[9]
                .parse()
                .map_err(|_| bad(format!("bad grad_evals `{}`", cols[9])))?,
            wall_ms: if cols[10].is_empty() {
                None
            } else {
                Some(cols[10].parse().map_err(|_| bad(format!("bad wall_ms `{}`", cols[10])))?)
            },
        })
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::new();
    writeln!(out, "{METRICS_HEADER}").unwrap();
    for r in records {
        writeln!(out, "{}", r.csv_line()).unwrap();
    }
    out
}

pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    std::fs::write(path, metrics_csv(records)).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                msg: format!("unexpected header {:?}", other.unwrap_or("")),
            })
        }
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| MetricsRecord::parse_line(l, path, i + 2))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig_formatting() {
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(1.0), "1");
        assert_eq!(fmt_sig(0.5), "0.5");
        assert_eq!(fmt_sig(std::f64::consts::LN_2), "0.693147181");
        assert_eq!(fmt_sig(-2.5e-7), "-2.5e-7");
        assert_eq!(fmt_sig(123456789.0), "123456789");
        assert_eq!(fmt_sig(1234567890.0), "1.23456789e9");
        assert_eq!(fmt_sig(0.99999999999), "1");
        assert_eq!(fmt_sig(1e-5), "0.00001");
        assert_eq!(fmt_sig(f64::NAN), "nan");
    }

    #[test]
    fn metrics_round_trip() {
        let rec = MetricsRecord {
            run_id: "a-s1".into(),
            seed: 1,
            epoch: 3,
            split: Split::Test,
            loss: 0.25,
            accuracy: 0.875,
            lr: 0.01,
            sharpness: Some(0.0125),
            adaptive_sharpness: None,
            grad_evals: 48,
            wall_ms: None,
        };
        assert_eq!(rec.csv_line(), "a-s1,1,3,test,0.25,0.875,0.01,0.0125,,48,");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics(&path, std::slice::from_ref(&rec)).unwrap();
        assert_eq!(read_metrics(&path).unwrap(), vec![rec]);
    }
}
