mod common;

use common::*;
use sharpkit::autodiff::{kernels, no_grad_eval, Exec, Graph};
use sharpkit::nn::{build_small_cnn, build_mlp, CnnOptions, MlpOptions, Mode, Model, ParamSet};
use sharpkit::Tensor;

fn check_op(case: OpCase) {
    for seed in 0..CASES_PER_OP {
        let err = gradcheck(case, seed);
        assert!(err < FD_TOL, "{case:?} seed {seed}: relative error {err:e}");
    }
}

macro_rules! op_tests {
    ($($name:ident => $case:expr,)*) => {
        $(#[test] fn $name() { check_op($case); })*
    };
}

op_tests! {
    matmul_gradient => OpCase::Matmul,
    add_gradient => OpCase::Add,
    bias_add_gradient => OpCase::BiasAdd,
    mul_gradient => OpCase::Mul,
    sum_gradient => OpCase::Sum,
    relu_gradient => OpCase::Relu,
    conv_padded_gradient => OpCase::Conv { stride: 1, padding: 1 },
    conv_strided_gradient => OpCase::Conv { stride: 2, padding: 0 },
    avgpool_gradient => OpCase::AvgPool,
    flatten_gradient => OpCase::Flatten,
    cross_entropy_gradient => OpCase::SoftmaxCrossEntropy,
    batch_norm_train_gradient => OpCase::BatchNormTrain,
    batch_norm_eval_gradient => OpCase::BatchNormEval,
}

/// Finite-difference gradient of a model loss w.r.t. every parameter.
fn numeric_grads(params: &ParamSet, loss: impl Fn(&ParamSet) -> f64) -> Vec<Tensor> {
    let mut out = Vec::new();
    for i in 0..params.len() {
        let mut g = Tensor::zeros(params.tensor(i).shape());
        for j in 0..g.numel() {
            let mut p = params.clone();
            p.tensor_mut(i).data_mut()[j] += FD_STEP;
            let up = loss(&p);
            p.tensor_mut(i).data_mut()[j] -= 2.0 * FD_STEP;
            let down = loss(&p);
            g.data_mut()[j] = (up - down) / (2.0 * FD_STEP);
        }
        out.push(g);
    }
    out
}

fn assert_close(analytic: &[Tensor], numeric: &[Tensor], what: &str) {
    for (a, n) in analytic.iter().zip(numeric) {
        for (x, y) in a.data().iter().zip(n.data()) {
            let rel = (x - y).abs() / x.abs().max(1.0);
            assert!(rel < FD_TOL, "{what}: analytic {x} numeric {y}");
        }
    }
}

#[test]
fn chain_rule_through_mlp() {
    for seed in 0..5 {
        let mut model = random_mlp(&[3, 5, 4, 3], true, seed);
        let (x, y) = random_batch(6, 3, 3, seed + 100);
        let (_, grads) = model.loss_and_grads(&x, &y, Mode::Train).unwrap();
        let numeric = numeric_grads(model.params(), |p| model.eval_loss_with(p, &x, &y).unwrap());
        assert_close(&grads, &numeric, "mlp");
    }
}

#[test]
fn chain_rule_through_cnn() {
    let mut model = build_small_cnn(1, 4, 4, 3, &CnnOptions { channels: [2, 3], ..Default::default() }, 7).unwrap();
    let mut r = rng(3);
    let x = uniform(&mut r, &[3, 1, 4, 4], -1.0, 1.0);
    let y = vec![0, 2, 1];
    let (_, grads) = model.loss_and_grads(&x, &y, Mode::Train).unwrap();
    let numeric = numeric_grads(model.params(), |p| model.eval_loss_with(p, &x, &y).unwrap());
    assert_close(&grads, &numeric, "cnn");
}

fn train_mode_loss(model: &Model, p: &ParamSet, x: &Tensor, y: &[usize]) -> f64 {
    let logits = model.logits_with(p, x, Mode::TrainFrozenStats).unwrap();
    kernels::softmax_cross_entropy(&logits, y).unwrap().0.data()[0]
}

#[test]
fn batch_norm_model_gradient() {
    let opts = MlpOptions {
        batchnorm: true,
        bias: true,
    };
    let mut model = build_mlp(&[3, 6, 3], opts, 11).unwrap();
    let (x, y) = random_batch(8, 3, 3, 12);
    let (_, grads) = model.loss_and_grads(&x, &y, Mode::TrainFrozenStats).unwrap();
    let numeric = numeric_grads(model.params(), |p| train_mode_loss(&model, p, &x, &y));
    assert_close(&grads, &numeric, "mlp with batch norm");

    let cnn_opts = CnnOptions {
        batchnorm: true,
        channels: [2, 2],
        ..Default::default()
    };
    let mut cnn = build_small_cnn(1, 4, 4, 2, &cnn_opts, 5).unwrap();
    let mut r = rng(9);
    let x = uniform(&mut r, &[4, 1, 4, 4], -1.0, 1.0);
    let y = vec![0, 1, 1, 0];
    let (_, grads) = cnn.loss_and_grads(&x, &y, Mode::TrainFrozenStats).unwrap();
    let numeric = numeric_grads(cnn.params(), |p| train_mode_loss(&cnn, p, &x, &y));
    assert_close(&grads, &numeric, "cnn with batch norm");
}

#[test]
fn no_grad_eval_matches_recorded_values() {
    let mut r = rng(42);
    for _ in 0..100 {
        let x = uniform(&mut r, &[4, 3], -2.0, 2.0);
        let w = uniform(&mut r, &[3, 2], -1.0, 1.0);
        let b = uniform(&mut r, &[2], -1.0, 1.0);
        let eager = no_grad_eval(
            |e, v| {
                let h = e.matmul(&v[0], &v[1])?;
                let h = e.add(&h, &v[2])?;
                e.relu(&h)
            },
            &[x.clone(), w.clone(), b.clone()],
        )
        .unwrap();
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.leaf(x, false), g.param(w), g.param(b));
        let h = g.matmul(&xv, &wv).unwrap();
        let h = g.add(&h, &bv).unwrap();
        let out = g.relu(&h).unwrap();
        let recorded = g.value(out);
        assert_eq!(recorded.shape(), eager.shape());
        assert!(recorded
            .data()
            .iter()
            .zip(eager.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn model_predictions_match_graph_logits() {
    let model = random_mlp(&[2, 8, 3], true, 1);
    let (x, _) = random_batch(5, 2, 3, 2);
    let eager = model.predict(&x).unwrap();
    let train = model.logits_with(model.params(), &x, Mode::Train).unwrap();
    assert_eq!(eager, train);
}
