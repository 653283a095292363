use crate::data::{Dataset, Normalization};
use crate::tensor::Tensor;

const STD_FLOOR: f64 = 1e-8;

/// Statistics fitted on a training split and applied unchanged to any split.
#[derive(Clone, Debug, PartialEq)]
pub enum Normalizer {
    Identity,
    /// Per-feature (per flattened input position) mean and std.
    Standardize { mean: Vec<f64>, std: Vec<f64> },
    /// Global min/max of the training features mapped to [0, 1].
    UnitRange { min: f64, max: f64 },
}

impl Normalizer {
    pub fn fit(train: &Dataset, mode: Normalization) -> Self {
        let x = &train.features;
        match mode {
            Normalization::None => Normalizer::Identity,
            Normalization::PerFeatureStandardize => {
                let n = train.len().max(1) as f64;
                let d: usize = train.example_shape().iter().product();
                let mut mean = vec![0.0; d];
                for row in x.data().chunks(d) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= n);
                let mut var = vec![0.0; d];
                for row in x.data().chunks(d) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m).powi(2);
                    }
                }
                let std = var.iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
                Normalizer::Standardize { mean, std }
            }
            Normalization::ScaleToUnit => Normalizer::UnitRange {
                min: x.data().iter().cloned().fold(f64::INFINITY, f64::min),
                max: x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            },
        }
    }

    pub fn apply(&self, ds: &Dataset) -> Dataset {
        let mut out = ds.clone();
        let features = match self {
            Normalizer::Identity => return out,
            Normalizer::Standardize { mean, std } => {
                let d = mean.len();
                let data = ds
                    .features
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (v - mean[i % d]) / std[i % d])
                    .collect();
                out.normalization = Normalization::PerFeatureStandardize;
                data
            }
            Normalizer::UnitRange { min, max } => {
                let range = if max > min { max - min } else { 1.0 };
                out.normalization = Normalization::ScaleToUnit;
                ds.features.data().iter().map(|v| (v - min) / range).collect()
            }
        };
        out.features = Tensor::new(ds.features.shape().to_vec(), features).unwrap();
        out
    }
}

/// Fit on `train` only and apply to both splits.
pub fn normalize(train: &Dataset, test: &Dataset, mode: Normalization) -> (Dataset, Dataset) {
    let n = Normalizer::fit(train, mode);
    (n.apply(train), n.apply(test))
}
