use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Eager, Exec, Graph};
use crate::error::{Error, Result};
use crate::nn::params::{ParamKind, ParamSet};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

/// Loss, per-parameter leaves or gradients, and batch-norm statistics of one pass.
type Pass<L, G> = (L, Vec<G>, Vec<(usize, BatchStats)>);

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;

/// Declarative layer description. Shapes are per example (no batch axis).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        has_bias: bool,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        has_bias: bool,
    },
    Relu,
    #[serde(rename = "batchnorm")]
    BatchNorm { channels: usize },
    Pool { size: usize },
    Flatten,
}

impl LayerSpec {
    pub fn is_linear(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv { .. })
    }

    /// Output shape for a per-example input shape.
    fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |msg: String| Error::Model(format!("layer{index}: {msg} (input {input:?})"));
        match *self {
            LayerSpec::Dense { inputs, outputs, .. } => {
                if input != [inputs] {
                    return Err(bad(format!("dense expects [{inputs}]")));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return Err(bad(format!("conv expects [{in_channels}, H, W]")));
                }
                if stride == 0 || kernel == 0 {
                    return Err(bad("conv kernel and stride must be positive".into()));
                }
                let (h, w) = (input[1] + 2 * padding, input[2] + 2 * padding);
                if h < kernel || w < kernel {
                    return Err(bad(format!("kernel {kernel} larger than padded input")));
                }
                Ok(vec![
                    out_channels,
                    (h - kernel) / stride + 1,
                    (w - kernel) / stride + 1,
                ])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::BatchNorm { channels } => {
                if input.first() != Some(&channels) {
                    return Err(bad(format!("batchnorm width {channels} does not match")));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Pool { size } => {
                if input.len() != 3 || size == 0 || input[1] < size || input[2] < size {
                    return Err(bad(format!("pool {size} needs [C, H, W] with H, W >= {size}")));
                }
                Ok(vec![input[0], input[1] / size, input[2] / size])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Batch statistics; running statistics are left alone. Used for the
    /// second (perturbed) pass of sharpness-aware steps.
    TrainFrozenStats,
    /// Running statistics; never mutates the model.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    /// `running = momentum * running + (1 - momentum) * batch`, with the
    /// unbiased batch variance.
    fn update(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        let correction = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        for (r, b) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&stats.var) {
            *r = m * *r + (1.0 - m) * b * correction;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    /// Indices into the model's [`ParamSet`].
    pub params: Vec<usize>,
    pub batch_norm: Option<BatchNormState>,
}

/// A sequential network: a layer stack plus its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    params: ParamSet,
    grad_evals: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpOptions {
    pub batchnorm: bool,
    pub bias: bool,
}

impl Default for MlpOptions {
    fn default() -> Self {
        MlpOptions {
            batchnorm: false,
            bias: true,
        }
    }
}

/// `dense -> (batchnorm) -> relu` blocks followed by a linear head.
pub fn mlp_specs(widths: &[usize], opts: MlpOptions) -> Result<Vec<LayerSpec>> {
    if widths.len() < 2 {
        return Err(Error::Model(format!(
            "an MLP needs at least 2 widths, got {widths:?}"
        )));
    }
    if widths.contains(&0) {
        return Err(Error::Model(format!("MLP widths must be positive: {widths:?}")));
    }
    let mut specs = Vec::new();
    for (i, pair) in widths.windows(2).enumerate() {
        specs.push(LayerSpec::Dense {
            inputs: pair[0],
            outputs: pair[1],
            has_bias: opts.bias,
        });
        if i + 2 < widths.len() {
            if opts.batchnorm {
                specs.push(LayerSpec::BatchNorm { channels: pair[1] });
            }
            specs.push(LayerSpec::Relu);
        }
    }
    Ok(specs)
}

pub fn build_mlp(widths: &[usize], opts: MlpOptions, seed: u64) -> Result<Model> {
    Model::new(vec![widths.first().copied().unwrap_or(0)], mlp_specs(widths, opts)?, seed)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CnnOptions {
    pub batchnorm: bool,
    pub bias: bool,
    /// Output channels of the two conv blocks.
    pub channels: [usize; 2],
}

impl Default for CnnOptions {
    fn default() -> Self {
        CnnOptions {
            batchnorm: false,
            bias: true,
            channels: [8, 16],
        }
    }
}

/// Two `conv3x3 -> (batchnorm) -> relu -> avgpool2` blocks and a dense head.
pub fn small_cnn_specs(
    in_channels: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    opts: &CnnOptions,
) -> Result<Vec<LayerSpec>> {
    if in_channels == 0 || num_classes == 0 || opts.channels.contains(&0) {
        return Err(Error::Model(
            "channel and class counts must be positive".into(),
        ));
    }
    let mut specs = Vec::new();
    let mut c = in_channels;
    let (mut h, mut w) = (height, width);
    for &out in &opts.channels {
        specs.push(LayerSpec::Conv {
            in_channels: c,
            out_channels: out,
            kernel: 3,
            stride: 1,
            padding: 1,
            has_bias: opts.bias,
        });
        if opts.batchnorm {
            specs.push(LayerSpec::BatchNorm { channels: out });
        }
        specs.push(LayerSpec::Relu);
        specs.push(LayerSpec::Pool { size: 2 });
        c = out;
        h /= 2;
        w /= 2;
    }
    specs.push(LayerSpec::Flatten);
    specs.push(LayerSpec::Dense {
        inputs: c * h * w,
        outputs: num_classes,
        has_bias: opts.bias,
    });
    Ok(specs)
}

pub fn build_small_cnn(
    in_channels: usize,
    height: usize,
    width: usize,
    num_classes: usize,
    opts: &CnnOptions,
    seed: u64,
) -> Result<Model> {
    let specs = small_cnn_specs(in_channels, height, width, num_classes, opts)?;
    Model::new(vec![in_channels, height, width], specs, seed)
}

/// Logits plus the batch statistics seen by each batch-norm layer.
struct ForwardOut<V> {
    logits: V,
    stats: Vec<(usize, BatchStats)>,
}

impl Model {
    /// Build and initialize a model. Weights are Kaiming-uniform
    /// (`U(-b, b)`, `b = sqrt(6 / fan_in)`), biases zero, batch-norm scale
    /// one and shift zero. Initialization draws from the `Init` stream of
    /// `seed` in parameter order.
    pub fn new(input_shape: Vec<usize>, specs: Vec<LayerSpec>, seed: u64) -> Result<Model> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Model(format!("invalid input shape {input_shape:?}")));
        }
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let mut shape = input_shape.clone();
        let mut params = ParamSet::new();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.into_iter().enumerate() {
            let next = spec.output_shape(i, &shape)?;
            let mut idx = Vec::new();
            let mut batch_norm = None;
            let mut kaiming = |shape: Vec<usize>, fan_in: usize| {
                let bound = (6.0 / fan_in as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::new(shape, data).unwrap()
            };
            match spec {
                LayerSpec::Dense {
                    inputs,
                    outputs,
                    has_bias,
                } => {
                    let w = kaiming(vec![inputs, outputs], inputs);
                    idx.push(params.push(format!("layer{i}.weight"), ParamKind::Weight, w)?);
                    if has_bias {
                        let b = Tensor::zeros(&[outputs]);
                        idx.push(params.push(format!("layer{i}.bias"), ParamKind::Bias, b)?);
                    }
                }
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    has_bias,
                    ..
                } => {
                    let w = kaiming(
                        vec![out_channels, in_channels, kernel, kernel],
                        in_channels * kernel * kernel,
                    );
                    idx.push(params.push(format!("layer{i}.weight"), ParamKind::Weight, w)?);
                    if has_bias {
                        let b = Tensor::zeros(&[out_channels]);
                        idx.push(params.push(format!("layer{i}.bias"), ParamKind::Bias, b)?);
                    }
                }
                LayerSpec::BatchNorm { channels } => {
                    let scale = Tensor::filled(&[channels], 1.0);
                    let shift = Tensor::zeros(&[channels]);
                    idx.push(params.push(format!("layer{i}.bn_scale"), ParamKind::BnScale, scale)?);
                    idx.push(params.push(format!("layer{i}.bn_shift"), ParamKind::BnShift, shift)?);
                    batch_norm = Some(BatchNormState::new(channels));
                }
                LayerSpec::Relu | LayerSpec::Pool { .. } | LayerSpec::Flatten => {}
            }
            layers.push(Layer {
                spec,
                params: idx,
                batch_norm,
            });
            shape = next;
        }
        if shape.len() != 1 {
            return Err(Error::Model(format!(
                "network output must be a vector of logits, got per-example shape {shape:?}"
            )));
        }
        Ok(Model {
            input_shape,
            layers,
            params,
            grad_evals: 0,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        let mut shape = self.input_shape.clone();
        for (i, l) in self.layers.iter().enumerate() {
            shape = l.spec.output_shape(i, &shape).expect("validated at build");
        }
        shape[0]
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Replace all parameters. Names, kinds and shapes must match.
    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        let compatible = params.len() == self.params.len()
            && params.iter().zip(self.params.iter()).all(|(a, b)| {
                a.name == b.name && a.kind == b.kind && a.tensor.same_shape(&b.tensor)
            });
        if !compatible {
            return Err(Error::Model("parameter set does not match architecture".into()));
        }
        self.params = params;
        Ok(())
    }

    /// Number of forward+backward passes run through [`Model::loss_and_grads`].
    pub fn grad_evals(&self) -> u64 {
        self.grad_evals
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.ndim() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            let mut expected = vec![0];
            expected.extend_from_slice(&self.input_shape);
            return Err(Error::ShapeMismatch {
                op: "model input",
                left: expected,
                right: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    fn run<E: Exec>(
        &self,
        exec: &mut E,
        params: &[E::Value],
        x: E::Value,
        mode: Mode,
    ) -> Result<ForwardOut<E::Value>> {
        let mut h = x;
        let mut stats = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let p = |k: usize| &params[layer.params[k]];
            h = match layer.spec {
                LayerSpec::Dense { has_bias, .. } => {
                    let y = exec.matmul(&h, p(0))?;
                    if has_bias {
                        exec.add(&y, p(1))?
                    } else {
                        y
                    }
                }
                LayerSpec::Conv {
                    stride,
                    padding,
                    has_bias,
                    ..
                } => {
                    let y = exec.conv2d(&h, p(0), stride, padding)?;
                    if has_bias {
                        exec.add(&y, p(1))?
                    } else {
                        y
                    }
                }
                LayerSpec::Relu => exec.relu(&h)?,
                LayerSpec::Pool { size } => exec.avgpool2d(&h, size)?,
                LayerSpec::Flatten => exec.flatten(&h)?,
                LayerSpec::BatchNorm { .. } => {
                    let bn = layer.batch_norm.as_ref().expect("batchnorm layer has state");
                    match mode {
                        Mode::Train | Mode::TrainFrozenStats => {
                            let (y, s) = exec.batch_norm_train(&h, p(0), p(1), bn.epsilon)?;
                            stats.push((i, s));
                            y
                        }
                        Mode::Eval => exec.batch_norm_eval(
                            &h,
                            p(0),
                            p(1),
                            &bn.running_mean,
                            &bn.running_var,
                            bn.epsilon,
                        )?,
                    }
                }
            };
        }
        Ok(ForwardOut { logits: h, stats })
    }

    fn apply_stats(&mut self, stats: &[(usize, BatchStats)]) {
        for (i, s) in stats {
            if let Some(bn) = self.layers[*i].batch_norm.as_mut() {
                bn.update(s);
            }
        }
    }

    /// Logits for `x` with externally supplied parameters; never mutates.
    pub fn logits_with(&self, params: &ParamSet, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_input(x)?;
        let vals: Vec<Tensor> = params.tensors().cloned().collect();
        Ok(self.run(&mut Eager, &vals, x.clone(), mode)?.logits)
    }

    /// Eager forward pass. In [`Mode::Train`] running statistics are updated.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_input(x)?;
        let vals: Vec<Tensor> = self.params.tensors().cloned().collect();
        let out = self.run(&mut Eager, &vals, x.clone(), mode)?;
        if mode == Mode::Train {
            self.apply_stats(&out.stats);
        }
        Ok(out.logits)
    }

    /// Eval-mode logits.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.logits_with(&self.params, x, Mode::Eval)
    }

    /// Record the forward pass on `graph`, returning the loss node and the
    /// parameter leaves.
    pub fn record_loss(
        &self,
        graph: &mut Graph,
        params: &ParamSet,
        x: &Tensor,
        labels: &[usize],
        mode: Mode,
    ) -> Result<Pass<crate::autodiff::Var, crate::autodiff::Var>> {
        self.check_input(x)?;
        let leaves: Vec<_> = params.tensors().map(|t| graph.param(t.clone())).collect();
        let input = graph.constant(x.clone());
        let out = self.run(graph, &leaves, input, mode)?;
        let loss = graph.softmax_cross_entropy(&out.logits, labels)?;
        Ok((loss, leaves, out.stats))
    }

    fn graph_pass(
        &self,
        params: &ParamSet,
        x: &Tensor,
        labels: &[usize],
        mode: Mode,
    ) -> Result<Pass<f64, Tensor>> {
        let mut graph = Graph::new();
        let (loss, leaves, stats) = self.record_loss(&mut graph, params, x, labels, mode)?;
        graph.backward(loss)?;
        let grads = leaves
            .iter()
            .zip(params.iter())
            .map(|(v, p)| {
                graph
                    .grad(*v)
                    .cloned()
                    .ok_or_else(|| Error::MissingGrad(p.name.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((graph.value(loss).data()[0], grads, stats))
    }

    /// One forward+backward pass over a batch; gradients are returned in
    /// parameter order. Counts toward [`Model::grad_evals`].
    pub fn loss_and_grads(
        &mut self,
        x: &Tensor,
        labels: &[usize],
        mode: Mode,
    ) -> Result<(f64, Vec<Tensor>)> {
        let (loss, grads, stats) = self.graph_pass(&self.params, x, labels, mode)?;
        if mode == Mode::Train {
            self.apply_stats(&stats);
        }
        self.grad_evals += 1;
        Ok((loss, grads))
    }

    /// Eval-mode loss and gradient at arbitrary parameters. Does not count
    /// toward [`Model::grad_evals`].
    pub fn eval_loss_and_grads_with(
        &self,
        params: &ParamSet,
        x: &Tensor,
        labels: &[usize],
    ) -> Result<(f64, Vec<Tensor>)> {
        let (loss, grads, _) = self.graph_pass(params, x, labels, Mode::Eval)?;
        Ok((loss, grads))
    }

    /// Eval-mode mean cross-entropy at arbitrary parameters.
    pub fn eval_loss_with(&self, params: &ParamSet, x: &Tensor, labels: &[usize]) -> Result<f64> {
        let logits = self.logits_with(params, x, Mode::Eval)?;
        let (loss, _) = crate::autodiff::kernels::softmax_cross_entropy(&logits, labels)?;
        Ok(loss.data()[0])
    }

    /// Eval-mode mean loss and accuracy, computed in chunks of `chunk`.
    pub fn evaluate(&self, x: &Tensor, labels: &[usize], chunk: usize) -> Result<(f64, f64)> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::InvalidArgument("cannot evaluate on an empty set".into()));
        }
        let chunk = chunk.max(1);
        let (mut total, mut correct) = (0.0, 0usize);
        let idx: Vec<usize> = (0..n).collect();
        for part in idx.chunks(chunk) {
            let xb = x.gather_rows(part);
            let yb: Vec<usize> = part.iter().map(|&i| labels[i]).collect();
            let logits = self.predict(&xb)?;
            let (loss, _) = crate::autodiff::kernels::softmax_cross_entropy(&logits, &yb)?;
            total += loss.data()[0] * part.len() as f64;
            correct += argmax_rows(&logits)
                .iter()
                .zip(&yb)
                .filter(|(p, y)| p == y)
                .count();
        }
        Ok((total / n as f64, correct as f64 / n as f64))
    }

    pub fn batch_norm_states(&self) -> impl Iterator<Item = (usize, &BatchNormState)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.batch_norm.as_ref().map(|b| (i, b)))
    }

    pub(crate) fn batch_norm_state_mut(&mut self, layer: usize) -> Option<&mut BatchNormState> {
        self.layers.get_mut(layer).and_then(|l| l.batch_norm.as_mut())
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}
