use crate::autodiff::kernels::{self, BatchNormSaved, BatchStats};
use crate::autodiff::Exec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add { a: Var, b: Var, bias: bool },
    Mul(Var, Var),
    Sum(Var),
    Relu(Var),
    Conv2d { x: Var, k: Var, stride: usize, padding: usize },
    AvgPool { x: Var, k: usize },
    Flatten(Var),
    SoftmaxCe { logits: Var, probs: Tensor, labels: Vec<usize> },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, saved: BatchNormSaved },
    BatchNormEval { x: Var, gamma: Var, beta: Var, saved: BatchNormSaved },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape. Inputs of a node always precede it, so a reverse sweep
/// over the node list is a valid topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Add a leaf tensor. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Drop all gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn accumulate(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse sweep from a scalar `loss`, populating gradients of every
    /// node that requires one. Each node is visited once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.nodes[loss.0].value.shape();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::filled(shape, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            let contributions = self.node_backward(i, &g);
            self.grads[i] = Some(g);
            for (v, dg) in contributions {
                self.accumulate(v, dg);
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (da, db) = kernels::matmul_backward(val(*a), val(*b), g);
                vec![(*a, da), (*b, db)]
            }
            Op::Add { a, b, bias } => {
                let db = if *bias {
                    kernels::bias_grad(val(*a).shape(), g)
                } else {
                    g.clone()
                };
                vec![(*a, g.clone()), (*b, db)]
            }
            Op::Mul(a, b) => {
                let da = kernels::mul(g, val(*b)).unwrap();
                let db = kernels::mul(g, val(*a)).unwrap();
                vec![(*a, da), (*b, db)]
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                vec![(*x, Tensor::filled(val(*x).shape(), gv))]
            }
            Op::Relu(x) => vec![(*x, kernels::relu_backward(val(*x), g))],
            Op::Conv2d {
                x,
                k,
                stride,
                padding,
            } => {
                let (dx, dk) = kernels::conv2d_backward(val(*x), val(*k), *stride, *padding, g);
                vec![(*x, dx), (*k, dk)]
            }
            Op::AvgPool { x, k } => {
                vec![(*x, kernels::avgpool2d_backward(val(*x).shape(), *k, g))]
            }
            Op::Flatten(x) => {
                let dx = g.clone().reshape(val(*x).shape().to_vec()).unwrap();
                vec![(*x, dx)]
            }
            Op::SoftmaxCe {
                logits,
                probs,
                labels,
            } => {
                let d = kernels::softmax_cross_entropy_backward(probs, labels, g.data()[0]);
                vec![(*logits, d)]
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                saved,
            } => {
                let (dx, dg, db) = kernels::batch_norm_train_backward(saved, val(*gamma), g);
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                saved,
            } => {
                let (dx, dg, db) = kernels::batch_norm_eval_backward(saved, val(*gamma), g);
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
        }
    }
}

impl Exec for Graph {
    type Value = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn tensor<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.value(*v)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = kernels::matmul(self.value(*a), self.value(*b))?;
        let rg = self.any_grad(&[*a, *b]);
        Ok(self.push(out, Op::MatMul(*a, *b), rg))
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let (av, bv) = (self.value(*a), self.value(*b));
        let bias = !av.same_shape(bv) && kernels::is_bias_add(av, bv);
        let out = kernels::add(av, bv)?;
        let rg = self.any_grad(&[*a, *b]);
        Ok(self.push(out, Op::Add { a: *a, b: *b, bias }, rg))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let out = kernels::mul(self.value(*a), self.value(*b))?;
        let rg = self.any_grad(&[*a, *b]);
        Ok(self.push(out, Op::Mul(*a, *b), rg))
    }

    fn sum(&mut self, x: &Var) -> Result<Var> {
        let out = kernels::sum(self.value(*x));
        let rg = self.any_grad(&[*x]);
        Ok(self.push(out, Op::Sum(*x), rg))
    }

    fn relu(&mut self, x: &Var) -> Result<Var> {
        let out = kernels::relu(self.value(*x));
        let rg = self.any_grad(&[*x]);
        Ok(self.push(out, Op::Relu(*x), rg))
    }

    fn conv2d(&mut self, x: &Var, k: &Var, stride: usize, padding: usize) -> Result<Var> {
        let out = kernels::conv2d(self.value(*x), self.value(*k), stride, padding)?;
        let rg = self.any_grad(&[*x, *k]);
        let op = Op::Conv2d {
            x: *x,
            k: *k,
            stride,
            padding,
        };
        Ok(self.push(out, op, rg))
    }

    fn avgpool2d(&mut self, x: &Var, k: usize) -> Result<Var> {
        let out = kernels::avgpool2d(self.value(*x), k)?;
        let rg = self.any_grad(&[*x]);
        Ok(self.push(out, Op::AvgPool { x: *x, k }, rg))
    }

    fn flatten(&mut self, x: &Var) -> Result<Var> {
        let out = kernels::flatten(self.value(*x))?;
        let rg = self.any_grad(&[*x]);
        Ok(self.push(out, Op::Flatten(*x), rg))
    }

    fn softmax_cross_entropy(&mut self, logits: &Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = kernels::softmax_cross_entropy(self.value(*logits), labels)?;
        let rg = self.any_grad(&[*logits]);
        let op = Op::SoftmaxCe {
            logits: *logits,
            probs,
            labels: labels.to_vec(),
        };
        Ok(self.push(loss, op, rg))
    }

    fn batch_norm_train(
        &mut self,
        x: &Var,
        gamma: &Var,
        beta: &Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (y, saved, stats) =
            kernels::batch_norm_train(self.value(*x), self.value(*gamma), self.value(*beta), eps)?;
        let rg = self.any_grad(&[*x, *gamma, *beta]);
        let op = Op::BatchNormTrain {
            x: *x,
            gamma: *gamma,
            beta: *beta,
            saved,
        };
        Ok((self.push(y, op, rg), stats))
    }

    fn batch_norm_eval(
        &mut self,
        x: &Var,
        gamma: &Var,
        beta: &Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (y, saved) = kernels::batch_norm_eval(
            self.value(*x),
            self.value(*gamma),
            self.value(*beta),
            mean,
            var,
            eps,
        )?;
        let rg = self.any_grad(&[*x, *gamma, *beta]);
        let op = Op::BatchNormEval {
            x: *x,
            gamma: *gamma,
            beta: *beta,
            saved,
        };
        Ok(self.push(y, op, rg))
    }
}
