//! Loss-landscape sharpness probes and the rectifier rescaling used to
//! show that plain sharpness is not reparameterization invariant.
//!
//! Sharpness is `max_{||eps|| <= rho} L(w + eps) - L(w)`; the adaptive form
//! takes the max over `||T_w^-1 eps|| <= rho` instead. The max is
//! approximated from below by evaluating a finite probe set: the zero
//! perturbation, `M` random points of the (rescaled) sphere and the
//! one-step gradient-ascent point.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{global_norm, LayerSpec, Model, ParamSet};
use crate::optim::{asam_perturbation, rescaling_operator, sam_perturbation};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

pub const DEFAULT_PROBES: usize = 64;
pub const DEFAULT_SLICE: usize = 256;
pub const DEFAULT_BINS: usize = 100;

/// A differentiable scalar function of a parameter set.
pub trait Objective: Sync {
    fn loss(&self, params: &ParamSet) -> Result<f64>;
    fn gradient(&self, params: &ParamSet) -> Result<Vec<Tensor>>;
}

/// Eval-mode cross-entropy of a model on a fixed batch.
pub struct ModelObjective<'a> {
    pub model: &'a Model,
    pub inputs: &'a Tensor,
    pub labels: &'a [usize],
}

impl Objective for ModelObjective<'_> {
    fn loss(&self, params: &ParamSet) -> Result<f64> {
        self.model.eval_loss_with(params, self.inputs, self.labels)
    }

    fn gradient(&self, params: &ParamSet) -> Result<Vec<Tensor>> {
        Ok(self
            .model
            .eval_loss_and_grads_with(params, self.inputs, self.labels)?
            .1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeMethod {
    RandomSphere,
    GradAscent,
    Combined,
}

impl ProbeMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbeMethod::RandomSphere => "random_sphere",
            ProbeMethod::GradAscent => "grad_ascent",
            ProbeMethod::Combined => "combined",
        }
    }
}

impl fmt::Display for ProbeMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProbeMethod {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "random_sphere" => Ok(ProbeMethod::RandomSphere),
            "grad_ascent" => Ok(ProbeMethod::GradAscent),
            "combined" => Ok(ProbeMethod::Combined),
            other => Err(format!("unknown probe method `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SharpnessConfig {
    pub rho: f64,
    /// Random sphere probes `M`.
    pub probes: usize,
    pub adaptive: bool,
    /// Stabilizer of the adaptive rescaling operator.
    pub eta: f64,
    pub method: ProbeMethod,
    pub seed: u64,
}

impl Default for SharpnessConfig {
    fn default() -> Self {
        SharpnessConfig {
            rho: crate::optim::DEFAULT_SAM_RHO,
            probes: DEFAULT_PROBES,
            adaptive: false,
            eta: crate::optim::DEFAULT_ASAM_ETA,
            method: ProbeMethod::Combined,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SharpnessEstimate {
    /// Largest loss increase seen, never negative.
    pub value: f64,
    pub rho: f64,
    pub method: ProbeMethod,
    /// Perturbations evaluated, including the zero perturbation.
    pub num_probes: usize,
    pub adaptive: bool,
}

impl SharpnessEstimate {
    pub const CSV_HEADER: &'static str = "value,rho,method,num_probes,adaptive";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            crate::experiments::fmt_sig(self.value),
            crate::experiments::fmt_sig(self.rho),
            self.method,
            self.num_probes,
            self.adaptive
        )
    }
}

/// `rho`-scaled random direction, rescaled by `T_w` when adaptive so that
/// `||T_w^-1 eps|| = rho`.
fn random_probe(
    params: &ParamSet,
    ops: Option<&[Tensor]>,
    rho: f64,
    rng: &mut impl rand::Rng,
) -> Vec<Tensor> {
    let mut dirs: Vec<Tensor> = params
        .tensors()
        .map(|t| {
            let data = (0..t.numel()).map(|_| StandardNormal.sample(rng)).collect();
            Tensor::new(t.shape().to_vec(), data).unwrap()
        })
        .collect();
    let norm = global_norm(&dirs);
    let scale = if norm > 0.0 { rho / norm } else { 0.0 };
    for (i, d) in dirs.iter_mut().enumerate() {
        for (j, v) in d.data_mut().iter_mut().enumerate() {
            *v *= scale;
            if let Some(ops) = ops {
                *v *= ops[i].data()[j];
            }
        }
    }
    dirs
}

fn shifted(params: &ParamSet, eps: &[Tensor]) -> ParamSet {
    let mut out = params.clone();
    for (w, e) in out.tensors_mut().zip(eps) {
        for (wi, ei) in w.data_mut().iter_mut().zip(e.data()) {
            *wi += ei;
        }
    }
    out
}

/// Sharpness of `objective` around `params`. `params` is only read; every
/// probe works on its own copy.
pub fn estimate_objective_sharpness(
    objective: &dyn Objective,
    params: &ParamSet,
    cfg: &SharpnessConfig,
) -> Result<SharpnessEstimate> {
    if !(cfg.rho >= 0.0 && cfg.rho.is_finite()) {
        return Err(Error::InvalidArgument(format!("rho must be non-negative, got {}", cfg.rho)));
    }
    if cfg.probes == 0 && cfg.method != ProbeMethod::GradAscent {
        return Err(Error::InvalidArgument("at least one probe is required".into()));
    }
    let base = objective.loss(params)?;
    let ops = cfg.adaptive.then(|| rescaling_operator(params, cfg.eta));

    let mut perturbations = Vec::new();
    if cfg.method != ProbeMethod::GradAscent {
        let mut rng = stream_rng(cfg.seed, Stream::Probe, 0);
        for _ in 0..cfg.probes {
            perturbations.push(random_probe(params, ops.as_deref(), cfg.rho, &mut rng));
        }
    }
    if cfg.method != ProbeMethod::RandomSphere {
        let g = objective.gradient(params)?;
        perturbations.push(if cfg.adaptive {
            asam_perturbation(params, &g, cfg.rho, cfg.eta)
        } else {
            sam_perturbation(&g, cfg.rho)
        });
    }

    let losses = perturbations
        .par_iter()
        .map(|eps| objective.loss(&shifted(params, eps)))
        .collect::<Result<Vec<f64>>>()?;
    let value = losses.iter().map(|l| l - base).fold(0.0, f64::max);
    Ok(SharpnessEstimate {
        value,
        rho: cfg.rho,
        method: cfg.method,
        num_probes: perturbations.len() + 1,
        adaptive: cfg.adaptive,
    })
}

/// Sharpness of a model's eval-mode loss on a fixed data slice.
pub fn estimate_sharpness(
    model: &Model,
    inputs: &Tensor,
    labels: &[usize],
    cfg: &SharpnessConfig,
) -> Result<SharpnessEstimate> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("sharpness needs a non-empty data slice".into()));
    }
    let objective = ModelObjective {
        model,
        inputs,
        labels,
    };
    estimate_objective_sharpness(&objective, model.params(), cfg)
}

/// Function-preserving reparameterization of a rectifier network: the
/// `index`-th dense/conv layer (counting only dense and conv layers) has its
/// weight and bias multiplied by `alpha`, the next one its weight divided by
/// `alpha`.
pub fn rectifier_rescale(model: &Model, index: usize, alpha: f64) -> Result<Model> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    let linear: Vec<usize> = model
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.spec.is_linear())
        .map(|(i, _)| i)
        .collect();
    let (Some(&first), Some(&second)) = (linear.get(index), linear.get(index + 1)) else {
        return Err(Error::InvalidArgument(format!(
            "need linear layers {index} and {}, model has {}",
            index + 1,
            linear.len()
        )));
    };
    let between = &model.layers()[first + 1..second];
    if between
        .iter()
        .any(|l| matches!(l.spec, LayerSpec::BatchNorm { .. }))
    {
        return Err(Error::InvalidArgument(format!(
            "batchnorm between layer{first} and layer{second} absorbs the rescaling"
        )));
    }
    let homogeneous = between
        .iter()
        .all(|l| matches!(l.spec, LayerSpec::Relu | LayerSpec::Pool { .. } | LayerSpec::Flatten));
    if !homogeneous || !between.iter().any(|l| l.spec == LayerSpec::Relu) {
        return Err(Error::InvalidArgument(format!(
            "layer{first} and layer{second} are not separated by a rectifier"
        )));
    }
    let mut out = model.clone();
    let params = out.params_mut();
    for &p in &model.layers()[first].params {
        for v in params.tensor_mut(p).data_mut() {
            *v *= alpha;
        }
    }
    let w_next = model.layers()[second].params[0];
    for v in params.tensor_mut(w_next).data_mut() {
        *v /= alpha;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// `counts.len() + 1` edges spanning `[min, max]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Fourth standardized moment minus 3; NaN for constant weights.
    pub excess_kurtosis: f64,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `bin_left,bin_right,count` rows followed by a
    /// `excess_kurtosis,<value>,<total>` metadata row.
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "bin_left,bin_right,count")?;
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(
                out,
                "{},{},{}",
                crate::experiments::fmt_sig(self.edges[i]),
                crate::experiments::fmt_sig(self.edges[i + 1]),
                c
            )?;
        }
        writeln!(
            out,
            "excess_kurtosis,{},{}",
            crate::experiments::fmt_sig(self.excess_kurtosis),
            self.total()
        )
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(&mut f).map_err(|e| Error::io(path, e))
    }
}

pub fn excess_kurtosis(values: &[f64]) -> f64 {
    if values.iter().all(|&v| v == values[0]) {
        return f64::NAN;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    if m2 == 0.0 {
        return f64::NAN;
    }
    m4 / (m2 * m2) - 3.0
}

pub fn histogram(values: &[f64], num_bins: usize) -> Result<Histogram> {
    if num_bins < 2 {
        return Err(Error::InvalidArgument("a histogram needs at least 2 bins".into()));
    }
    if values.is_empty() {
        return Err(Error::InvalidArgument("histogram of no values".into()));
    }
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = (max - min) / num_bins as f64;
    let edges = (0..=num_bins)
        .map(|i| if i == num_bins { max } else { min + width * i as f64 })
        .collect();
    let mut counts = vec![0; num_bins];
    for &v in values {
        let bin = if width > 0.0 {
            (((v - min) / width) as usize).min(num_bins - 1)
        } else {
            0
        };
        counts[bin] += 1;
    }
    Ok(Histogram {
        edges,
        counts,
        excess_kurtosis: excess_kurtosis(values),
    })
}

/// Histogram of one named parameter tensor, e.g. `layer0.weight`.
pub fn weight_histogram(model: &Model, layer_name: &str, num_bins: usize) -> Result<Histogram> {
    let param = model
        .params()
        .by_name(layer_name)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown layer `{layer_name}`")))?;
    histogram(param.tensor.data(), num_bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_mlp, MlpOptions, ParamKind};
    use rand::Rng;

    #[test]
    fn histogram_of_constant_weights() {
        let h = histogram(&[0.3; 17], 10).unwrap();
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(h.total(), 17);
        assert!(h.excess_kurtosis.is_nan());
    }

    #[test]
    fn histogram_counts_cover_layer() {
        let m = build_mlp(&[4, 32, 3], MlpOptions::default(), 5).unwrap();
        let h = weight_histogram(&m, "layer0.weight", 13).unwrap();
        assert_eq!(h.total(), 128);
        assert_eq!(h.edges.len(), 14);
        let w = m.params().by_name("layer0.weight").unwrap().tensor.data().to_vec();
        let min = w.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(h.edges[0], min);
        assert_eq!(*h.edges.last().unwrap(), max);
        assert!(weight_histogram(&m, "layer7.weight", 10).is_err());
        assert!(weight_histogram(&m, "layer0.weight", 1).is_err());
    }

    #[test]
    fn normal_weights_have_small_excess_kurtosis() {
        let mut rng = stream_rng(2024, Stream::DataNoise, 0);
        let v: Vec<f64> = (0..10_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let k = excess_kurtosis(&v);
        assert!((-0.2..=0.2).contains(&k), "kurtosis {k}");
        // Uniform: -1.2.
        let u: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        assert!((excess_kurtosis(&u) + 1.2).abs() < 0.05);
    }

    #[test]
    fn histogram_csv_layout() {
        let h = histogram(&[0.0, 1.0, 1.0, 2.0], 2).unwrap();
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "bin_left,bin_right,count");
        assert_eq!(lines[1], "0,1,1");
        assert_eq!(lines[2], "1,2,3");
        assert!(lines[3].starts_with("excess_kurtosis,"));
        assert!(lines[3].ends_with(",4"));
    }

    #[test]
    fn rescale_rejects_bad_arguments() {
        let m = build_mlp(&[2, 4, 4, 2], MlpOptions::default(), 1).unwrap();
        assert!(rectifier_rescale(&m, 0, 0.0).is_err());
        assert!(rectifier_rescale(&m, 0, -2.0).is_err());
        assert!(rectifier_rescale(&m, 2, 2.0).is_err());
        let bn = build_mlp(
            &[2, 4, 4, 2],
            MlpOptions {
                batchnorm: true,
                bias: true,
            },
            1,
        )
        .unwrap();
        let err = rectifier_rescale(&bn, 0, 2.0).unwrap_err().to_string();
        assert!(err.contains("batchnorm"), "{err}");
    }

    #[test]
    fn rescale_identity() {
        let m = build_mlp(&[2, 4, 4, 2], MlpOptions::default(), 1).unwrap();
        let r = rectifier_rescale(&m, 1, 1.0).unwrap();
        assert!(r.params().bit_eq(m.params()));
    }

    #[test]
    fn rescale_without_rectifier_rejected() {
        let specs = vec![
            LayerSpec::Dense {
                inputs: 2,
                outputs: 3,
                has_bias: false,
            },
            LayerSpec::Dense {
                inputs: 3,
                outputs: 2,
                has_bias: false,
            },
        ];
        let m = Model::new(vec![2], specs, 0).unwrap();
        assert!(rectifier_rescale(&m, 0, 2.0).is_err());
    }

    struct Constant;

    impl Objective for Constant {
        fn loss(&self, _: &ParamSet) -> Result<f64> {
            Ok(1.5)
        }
        fn gradient(&self, params: &ParamSet) -> Result<Vec<Tensor>> {
            Ok(params.tensors().map(|t| Tensor::zeros(t.shape())).collect())
        }
    }

    #[test]
    fn constant_loss_has_zero_sharpness() {
        let mut ps = ParamSet::new();
        ps.push("w", ParamKind::Weight, Tensor::vector(vec![1.0, -2.0])).unwrap();
        let est = estimate_objective_sharpness(&Constant, &ps, &SharpnessConfig::default()).unwrap();
        assert_eq!(est.value, 0.0);
        assert_eq!(est.num_probes, DEFAULT_PROBES + 2);
    }

    #[test]
    fn rejects_empty_slice_and_zero_probes() {
        let m = build_mlp(&[2, 4, 2], MlpOptions::default(), 1).unwrap();
        let x = Tensor::zeros(&[0, 2]);
        assert!(estimate_sharpness(&m, &x, &[], &SharpnessConfig::default()).is_err());
        let cfg = SharpnessConfig {
            probes: 0,
            ..SharpnessConfig::default()
        };
        let x = Tensor::zeros(&[1, 2]);
        assert!(estimate_sharpness(&m, &x, &[0], &cfg).is_err());
    }
}
