use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
}

impl ParamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::BnScale => "bn_scale",
            ParamKind::BnShift => "bn_shift",
        }
    }
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ParamKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "weight" => Ok(ParamKind::Weight),
            "bias" => Ok(ParamKind::Bias),
            "bn_scale" => Ok(ParamKind::BnScale),
            "bn_shift" => Ok(ParamKind::BnShift),
            other => Err(format!("unknown parameter kind `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

/// Ordered, uniquely named trainable tensors. Iteration order is insertion
/// order and is what every optimizer and checkpoint relies on.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::Model(format!("duplicate parameter name `{name}`")));
        }
        self.params.push(Param { name, kind, tensor });
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param> {
        self.params.iter()
    }

    pub fn get(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.params[index].tensor
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.params[index].tensor
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.params.iter().map(|p| &p.tensor)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.tensor)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Check that `grads` lines up with this set, tensor by tensor.
    pub fn check_aligned(&self, grads: &[Tensor]) -> Result<()> {
        if grads.len() != self.params.len() {
            let missing = self
                .params
                .get(grads.len())
                .map_or_else(|| "<extra gradient>".to_string(), |p| p.name.clone());
            return Err(Error::MissingGrad(missing));
        }
        for (p, g) in self.params.iter().zip(grads) {
            if !p.tensor.same_shape(g) {
                return Err(Error::ShapeMismatch {
                    op: "gradient",
                    left: p.tensor.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// All values flattened in iteration order.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Exact equality of names, kinds, shapes and value bits.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.kind == b.kind
                    && a.tensor.shape() == b.tensor.shape()
                    && a
                        .tensor
                        .data()
                        .iter()
                        .zip(b.tensor.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Euclidean norm over the concatenation of all tensors.
pub fn global_norm<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> f64 {
    tensors.into_iter().map(Tensor::sum_squares).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut ps = ParamSet::new();
        ps.push("layer0.weight", ParamKind::Weight, Tensor::zeros(&[1])).unwrap();
        assert!(ps.push("layer0.weight", ParamKind::Bias, Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn grads_must_align() {
        let mut ps = ParamSet::new();
        ps.push("a", ParamKind::Weight, Tensor::zeros(&[2])).unwrap();
        assert!(matches!(ps.check_aligned(&[]), Err(Error::MissingGrad(n)) if n == "a"));
        assert!(ps.check_aligned(&[Tensor::zeros(&[3])]).is_err());
        assert!(ps.check_aligned(&[Tensor::zeros(&[2])]).is_ok());
    }
}
