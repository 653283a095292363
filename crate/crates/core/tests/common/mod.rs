#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sharpkit::autodiff::{Eager, Exec, Graph};
use sharpkit::nn::{build_mlp, MlpOptions, Model, ParamSet};
use sharpkit::sharpness::Objective;
use sharpkit::{Result, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-6;
pub const CASES_PER_OP: u64 = 50;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values in `[-1, -0.1] U [0.1, 1]`, away from the relu kink.
pub fn off_kink(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpCase {
    Matmul,
    Add,
    BiasAdd,
    Mul,
    Sum,
    Relu,
    Conv { stride: usize, padding: usize },
    AvgPool,
    Flatten,
    SoftmaxCrossEntropy,
    BatchNormTrain,
    BatchNormEval,
}

pub const ALL_OPS: [OpCase; 13] = [
    OpCase::Matmul,
    OpCase::Add,
    OpCase::BiasAdd,
    OpCase::Mul,
    OpCase::Sum,
    OpCase::Relu,
    OpCase::Conv { stride: 1, padding: 1 },
    OpCase::Conv { stride: 2, padding: 0 },
    OpCase::AvgPool,
    OpCase::Flatten,
    OpCase::SoftmaxCrossEntropy,
    OpCase::BatchNormTrain,
    OpCase::BatchNormEval,
];

/// Inputs for one random instance of an op, plus fixed output weights and
/// labels so every case reduces to a scalar.
pub struct Instance {
    pub inputs: Vec<Tensor>,
    pub out_weights: Option<Tensor>,
    pub labels: Vec<usize>,
    pub stats: (Vec<f64>, Vec<f64>),
}

pub fn instance(case: OpCase, seed: u64) -> Instance {
    let mut r = rng(seed);
    let mut labels = vec![];
    let mut stats = (vec![], vec![]);
    let inputs = match case {
        OpCase::Matmul => vec![uniform(&mut r, &[3, 4], -1.0, 1.0), uniform(&mut r, &[4, 2], -1.0, 1.0)],
        OpCase::Add | OpCase::Mul => {
            vec![uniform(&mut r, &[3, 4], -1.0, 1.0), uniform(&mut r, &[3, 4], -1.0, 1.0)]
        }
        OpCase::BiasAdd => {
            if seed.is_multiple_of(2) {
                vec![uniform(&mut r, &[3, 4], -1.0, 1.0), uniform(&mut r, &[4], -1.0, 1.0)]
            } else {
                vec![uniform(&mut r, &[2, 3, 2, 2], -1.0, 1.0), uniform(&mut r, &[3], -1.0, 1.0)]
            }
        }
        OpCase::Sum => vec![uniform(&mut r, &[2, 3, 2], -1.0, 1.0)],
        OpCase::Relu => vec![off_kink(&mut r, &[3, 5])],
        OpCase::Conv { .. } => vec![
            uniform(&mut r, &[2, 2, 5, 5], -1.0, 1.0),
            uniform(&mut r, &[3, 2, 3, 3], -1.0, 1.0),
        ],
        OpCase::AvgPool => vec![uniform(&mut r, &[2, 2, 4, 4], -1.0, 1.0)],
        OpCase::Flatten => vec![uniform(&mut r, &[2, 2, 2, 3], -1.0, 1.0)],
        OpCase::SoftmaxCrossEntropy => {
            labels = (0..4).map(|_| r.random_range(0..3)).collect();
            vec![uniform(&mut r, &[4, 3], -2.0, 2.0)]
        }
        OpCase::BatchNormTrain => {
            let x = if seed.is_multiple_of(2) {
                uniform(&mut r, &[6, 3], -2.0, 2.0)
            } else {
                uniform(&mut r, &[3, 2, 2, 2], -2.0, 2.0)
            };
            let c = x.shape()[1];
            vec![x, uniform(&mut r, &[c], 0.5, 1.5), uniform(&mut r, &[c], -0.5, 0.5)]
        }
        OpCase::BatchNormEval => {
            let x = uniform(&mut r, &[4, 3], -2.0, 2.0);
            stats = (
                (0..3).map(|_| r.random_range(-0.5..0.5)).collect(),
                (0..3).map(|_| r.random_range(0.5..2.0)).collect(),
            );
            vec![x, uniform(&mut r, &[3], 0.5, 1.5), uniform(&mut r, &[3], -0.5, 0.5)]
        }
    };
    let out_weights = match case {
        OpCase::SoftmaxCrossEntropy | OpCase::Sum => None,
        _ => {
            let mut e = Eager;
            let y = apply_op(case, &mut e, &inputs, &labels, &stats).unwrap();
            Some(uniform(&mut r, y.shape(), -1.0, 1.0))
        }
    };
    Instance {
        inputs,
        out_weights,
        labels,
        stats,
    }
}

fn apply_op<E: Exec>(
    case: OpCase,
    e: &mut E,
    xs: &[E::Value],
    labels: &[usize],
    stats: &(Vec<f64>, Vec<f64>),
) -> Result<E::Value> {
    match case {
        OpCase::Matmul => e.matmul(&xs[0], &xs[1]),
        OpCase::Add | OpCase::BiasAdd => e.add(&xs[0], &xs[1]),
        OpCase::Mul => e.mul(&xs[0], &xs[1]),
        OpCase::Sum => e.sum(&xs[0]),
        OpCase::Relu => e.relu(&xs[0]),
        OpCase::Conv { stride, padding } => e.conv2d(&xs[0], &xs[1], stride, padding),
        OpCase::AvgPool => e.avgpool2d(&xs[0], 2),
        OpCase::Flatten => e.flatten(&xs[0]),
        OpCase::SoftmaxCrossEntropy => e.softmax_cross_entropy(&xs[0], labels),
        OpCase::BatchNormTrain => e.batch_norm_train(&xs[0], &xs[1], &xs[2], 1e-5).map(|(y, _)| y),
        OpCase::BatchNormEval => e.batch_norm_eval(&xs[0], &xs[1], &xs[2], &stats.0, &stats.1, 1e-5),
    }
}

/// Scalar objective `sum(op(x) * R)` (or the op itself when scalar).
pub fn scalar_of<E: Exec>(case: OpCase, inst: &Instance, e: &mut E, xs: &[E::Value]) -> Result<E::Value> {
    let y = apply_op(case, e, xs, &inst.labels, &inst.stats)?;
    match &inst.out_weights {
        Some(w) => {
            let w = e.constant(w.clone());
            let z = e.mul(&y, &w)?;
            e.sum(&z)
        }
        None => Ok(y),
    }
}

fn eager_value(case: OpCase, inst: &Instance, inputs: &[Tensor]) -> f64 {
    scalar_of(case, inst, &mut Eager, inputs).unwrap().data()[0]
}

/// Largest `|analytic - numeric| / max(1, |analytic|)` over all input
/// entries, with central differences of step `FD_STEP`.
pub fn gradcheck(case: OpCase, seed: u64) -> f64 {
    let inst = instance(case, seed);
    let mut g = Graph::new();
    let leaves: Vec<_> = inst.inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = scalar_of(case, &inst, &mut g, &leaves).unwrap();
    g.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = g.grad(*leaf).expect("input gradient").clone();
        for j in 0..inst.inputs[i].numel() {
            let mut plus = inst.inputs.clone();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inst.inputs.clone();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eager_value(case, &inst, &plus) - eager_value(case, &inst, &minus)) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    worst
}

pub fn random_mlp(widths: &[usize], bias: bool, seed: u64) -> Model {
    build_mlp(
        widths,
        MlpOptions {
            batchnorm: false,
            bias,
        },
        seed,
    )
    .unwrap()
}

/// Random inputs with random labels.
pub fn random_batch(n: usize, dims: usize, classes: usize, seed: u64) -> (Tensor, Vec<usize>) {
    let mut r = rng(seed);
    let x = uniform(&mut r, &[n, dims], -1.0, 1.0);
    let y = (0..n).map(|_| r.random_range(0..classes)).collect();
    (x, y)
}

/// `0.5 * sum(w^2)` over all parameters.
pub struct Bowl;

impl Objective for Bowl {
    fn loss(&self, params: &ParamSet) -> Result<f64> {
        Ok(0.5 * params.tensors().map(Tensor::sum_squares).sum::<f64>())
    }

    fn gradient(&self, params: &ParamSet) -> Result<Vec<Tensor>> {
        Ok(params.tensors().cloned().collect())
    }
}

pub fn dot(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| p * q).sum::<f64>())
        .sum()
}

pub fn norm(a: &[Tensor]) -> f64 {
    dot(a, a).sqrt()
}
