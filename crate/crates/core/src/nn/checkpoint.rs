//! Checkpoint file format, version 1.
//!
//! A UTF-8 text file. The first line is [`CHECKPOINT_HEADER`]. Every
//! following non-empty line is one entry:
//!
//! ```text
//! param <name> <kind> <dims> <v0> <v1> ...
//! buffer <name> <dims> <v0> <v1> ...
//! ```
//!
//! `<dims>` is a comma-separated list of sizes (`-` for a scalar), values
//! are row-major and written in Rust's shortest round-trip `f64` form, so a
//! write/read cycle is bit-exact. `param` lines appear in parameter order.
//! `buffer` lines hold batch-norm running statistics, named
//! `layer{i}.running_mean` / `layer{i}.running_var`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::model::Model;
use crate::nn::params::{ParamKind, ParamSet};
use crate::tensor::Tensor;

pub const CHECKPOINT_HEADER: &str = "sharpkit-checkpoint v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet,
    pub buffers: Vec<(String, Tensor)>,
}

fn write_tensor(out: &mut String, t: &Tensor) {
    if t.shape().is_empty() {
        out.push('-');
    } else {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        out.push_str(&dims.join(","));
    }
    for v in t.data() {
        write!(out, " {v:?}").unwrap();
    }
    out.push('\n');
}

fn parse_tensor<'a>(
    dims: &str,
    values: impl Iterator<Item = &'a str>,
    bad: &dyn Fn(String) -> Error,
) -> Result<Tensor> {
    let shape = if dims == "-" {
        vec![]
    } else {
        dims.split(',')
            .map(|d| d.parse::<usize>().map_err(|e| bad(format!("bad dims `{dims}`: {e}"))))
            .collect::<Result<Vec<_>>>()?
    };
    let data = values
        .map(|v| v.parse::<f64>().map_err(|e| bad(format!("bad value `{v}`: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(shape, data).map_err(|e| bad(e.to_string()))
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        let mut buffers = Vec::new();
        for (i, bn) in model.batch_norm_states() {
            buffers.push((
                format!("layer{i}.running_mean"),
                Tensor::vector(bn.running_mean.clone()),
            ));
            buffers.push((
                format!("layer{i}.running_var"),
                Tensor::vector(bn.running_var.clone()),
            ));
        }
        Checkpoint {
            params: model.params().clone(),
            buffers,
        }
    }

    /// Load parameters and running statistics into `model`; names, kinds and
    /// shapes must match its architecture.
    pub fn apply_to(&self, model: &mut Model) -> Result<()> {
        model.set_params(self.params.clone())?;
        let layers: Vec<usize> = model.batch_norm_states().map(|(i, _)| i).collect();
        if self.buffers.len() != 2 * layers.len() {
            return Err(Error::Model(format!(
                "checkpoint has {} buffers, model expects {}",
                self.buffers.len(),
                2 * layers.len()
            )));
        }
        for i in layers {
            let find = |suffix: &str| {
                let name = format!("layer{i}.{suffix}");
                self.buffers
                    .iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, t)| t.data().to_vec())
                    .ok_or_else(|| Error::Model(format!("checkpoint lacks buffer `{name}`")))
            };
            let (mean, var) = (find("running_mean")?, find("running_var")?);
            let bn = model.batch_norm_state_mut(i).expect("listed above");
            if mean.len() != bn.running_mean.len() || var.len() != bn.running_var.len() {
                return Err(Error::Model(format!("layer{i}: running stats have wrong width")));
            }
            bn.running_mean = mean;
            bn.running_var = var;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(CHECKPOINT_HEADER);
        out.push('\n');
        for p in self.params.iter() {
            write!(out, "param {} {} ", p.name, p.kind).unwrap();
            write_tensor(&mut out, &p.tensor);
        }
        for (name, t) in &self.buffers {
            write!(out, "buffer {name} ").unwrap();
            write_tensor(&mut out, t);
        }
        out
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let bad_at = |line: usize, msg: String| Error::Parse {
            path: origin.to_path_buf(),
            msg: format!("line {}: {msg}", line + 1),
        };
        match lines.next() {
            Some((_, h)) if h == CHECKPOINT_HEADER => {}
            Some((_, h)) => return Err(bad_at(0, format!("unsupported header `{h}`"))),
            None => return Err(bad_at(0, "empty checkpoint".into())),
        }
        let mut params = ParamSet::new();
        let mut buffers = Vec::new();
        for (no, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| bad_at(no, msg);
            let mut fields = line.split_ascii_whitespace();
            match fields.next() {
                Some("param") => {
                    let (Some(name), Some(kind), Some(dims)) =
                        (fields.next(), fields.next(), fields.next())
                    else {
                        return Err(bad("param line needs name, kind and dims".into()));
                    };
                    let kind: ParamKind = kind.parse().map_err(&bad)?;
                    let t = parse_tensor(dims, fields, &bad)?;
                    params.push(name, kind, t).map_err(|e| bad(e.to_string()))?;
                }
                Some("buffer") => {
                    let (Some(name), Some(dims)) = (fields.next(), fields.next()) else {
                        return Err(bad("buffer line needs name and dims".into()));
                    };
                    buffers.push((name.to_string(), parse_tensor(dims, fields, &bad)?));
                }
                Some(other) => return Err(bad(format!("unknown entry `{other}`"))),
                None => unreachable!("blank lines skipped"),
            }
        }
        Ok(Checkpoint { params, buffers })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::{build_mlp, MlpOptions, Mode};
    use proptest::prelude::*;

    #[test]
    fn golden_text() {
        let mut ps = ParamSet::new();
        ps.push("layer0.weight", ParamKind::Weight, Tensor::new(vec![2, 1], vec![0.5, -1.25]).unwrap())
            .unwrap();
        ps.push("layer0.bias", ParamKind::Bias, Tensor::vector(vec![0.1])).unwrap();
        ps.push("layer1.bn_scale", ParamKind::BnScale, Tensor::scalar(1.0)).unwrap();
        let ckpt = Checkpoint {
            params: ps,
            buffers: vec![("layer1.running_var".into(), Tensor::vector(vec![1e-7, 3.0]))],
        };
        let expected = "sharpkit-checkpoint v1\n\
            param layer0.weight weight 2,1 0.5 -1.25\n\
            param layer0.bias bias 1 0.1\n\
            param layer1.bn_scale bn_scale - 1.0\n\
            buffer layer1.running_var 2 1e-7 3.0\n";
        assert_eq!(ckpt.to_text(), expected);
        assert_eq!(Checkpoint::parse(expected, Path::new("golden")).unwrap(), ckpt);
    }

    #[test]
    fn model_round_trip_with_batchnorm() {
        let opts = MlpOptions {
            batchnorm: true,
            bias: true,
        };
        let mut m = build_mlp(&[2, 5, 3], opts, 3).unwrap();
        let x = Tensor::new(vec![4, 2], vec![0.1, 0.2, -0.3, 0.4, 1.5, -0.6, 0.7, 0.8]).unwrap();
        m.forward(&x, Mode::Train).unwrap();
        let ckpt = Checkpoint::from_model(&m);
        let parsed = Checkpoint::parse(&ckpt.to_text(), Path::new("mem")).unwrap();
        let mut fresh = build_mlp(&[2, 5, 3], opts, 99).unwrap();
        parsed.apply_to(&mut fresh).unwrap();
        assert_eq!(m.predict(&x).unwrap(), fresh.predict(&x).unwrap());
    }

    #[test]
    fn rejects_bad_header_and_mismatched_architecture() {
        assert!(Checkpoint::parse("nope\n", Path::new("x")).is_err());
        let m = build_mlp(&[2, 5, 3], MlpOptions::default(), 3).unwrap();
        let mut other = build_mlp(&[2, 6, 3], MlpOptions::default(), 3).unwrap();
        assert!(Checkpoint::from_model(&m).apply_to(&mut other).is_err());
    }

    proptest! {
        #[test]
        fn text_round_trip_preserves_order_and_bits(
            values in prop::collection::vec(prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..6), 1..5)
        ) {
            let mut ps = ParamSet::new();
            for (i, v) in values.iter().enumerate() {
                ps.push(format!("layer{i}.weight"), ParamKind::Weight, Tensor::vector(v.clone())).unwrap();
            }
            let ckpt = Checkpoint { params: ps, buffers: vec![] };
            let back = Checkpoint::parse(&ckpt.to_text(), Path::new("p")).unwrap();
            prop_assert!(back.params.bit_eq(&ckpt.params));
        }
    }
}
