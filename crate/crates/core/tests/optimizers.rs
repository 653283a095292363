mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sharpkit::nn::{Mode, Model, ParamKind, ParamSet};
use sharpkit::optim::{
    asam_perturbation, rescaling_operator, sam_perturbation, Asam, AsamConfig, Optimizer, Sam,
    SamConfig, Sgd, SgdConfig,
};
use sharpkit::sharpness::rectifier_rescale;
use sharpkit::Tensor;

fn base(lr: f64, momentum: f64, weight_decay: f64) -> SgdConfig {
    SgdConfig {
        learning_rate: lr,
        momentum,
        weight_decay,
    }
}

fn trajectory(mut model: Model, mut opt: Optimizer, steps: usize, seed: u64) -> Vec<ParamSet> {
    let mut out = Vec::new();
    for s in 0..steps {
        let (x, y) = random_batch(8, 3, 3, seed * 1000 + s as u64);
        opt.step(&mut model, &x, &y).unwrap();
        out.push(model.params().clone());
    }
    out
}

fn same_trajectory(a: &[ParamSet], b: &[ParamSet]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(p, q)| p.bit_eq(q))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn zero_radius_reduces_to_sgd(
        seed in 0u64..1000,
        lr in 0.01f64..0.5,
        momentum in 0.0f64..0.95,
        wd in 0.0f64..0.01,
        eta in 0.0f64..0.1,
    ) {
        let model = random_mlp(&[3, 6, 3], true, seed);
        let cfg = base(lr, momentum, wd);
        let sgd = trajectory(model.clone(), Optimizer::Sgd(Sgd::new(cfg).unwrap()), 20, seed);
        let sam = Optimizer::Sam(Sam::new(SamConfig { rho: 0.0, base: cfg }).unwrap());
        let asam = Optimizer::Asam(Asam::new(AsamConfig { rho: 0.0, eta, base: cfg }).unwrap());
        prop_assert!(same_trajectory(&sgd, &trajectory(model.clone(), sam, 20, seed)));
        prop_assert!(same_trajectory(&sgd, &trajectory(model, asam, 20, seed)));
    }

    #[test]
    fn perturbation_norms(seed in 0u64..10_000, rho in 0.001f64..3.0, eta in 0.0f64..0.5) {
        let model = random_mlp(&[4, 5, 3], true, seed);
        let mut r = rng(seed);
        let grads: Vec<Tensor> = model.params().tensors().map(|t| uniform(&mut r, t.shape(), -1.0, 1.0)).collect();
        let eps = sam_perturbation(&grads, rho);
        prop_assert!((norm(&eps) - rho).abs() < 1e-12);

        let eps = asam_perturbation(model.params(), &grads, rho, eta);
        let ops = rescaling_operator(model.params(), eta);
        let scaled: Vec<Tensor> = eps
            .iter()
            .zip(&ops)
            .map(|(e, t)| Tensor::new(e.shape().to_vec(), e.data().iter().zip(t.data()).map(|(a, b)| a / b).collect()).unwrap())
            .collect();
        prop_assert!((norm(&scaled) - rho).abs() < 1e-12);
    }

    #[test]
    fn sam_direction_ignores_gradient_scale(seed in 0u64..10_000, c in 0.01f64..100.0) {
        let mut r = rng(seed);
        let g = vec![uniform(&mut r, &[3, 2], -1.0, 1.0), uniform(&mut r, &[2], -1.0, 1.0)];
        let gc: Vec<Tensor> = g.iter().map(|t| t.map(|v| v * c)).collect();
        let a = sam_perturbation(&g, 0.3);
        let b = sam_perturbation(&gc, 0.3);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(x.max_abs_diff(y) < 1e-13);
        }
    }
}

fn single(kind: ParamKind, values: Vec<f64>) -> ParamSet {
    let mut p = ParamSet::new();
    p.push("p", kind, Tensor::vector(values)).unwrap();
    p
}

#[test]
fn hand_computed_perturbations() {
    let g = vec![Tensor::vector(vec![3.0, 4.0])];
    let eps = sam_perturbation(&g, 1.0);
    assert!((eps[0].data()[0] - 0.6).abs() < 1e-12 && (eps[0].data()[1] - 0.8).abs() < 1e-12);

    let unit = single(ParamKind::Weight, vec![1.0, -1.0]);
    let eps = asam_perturbation(&unit, &g, 1.0, 0.0);
    assert!((eps[0].data()[0] - 0.6).abs() < 1e-12 && (eps[0].data()[1] - 0.8).abs() < 1e-12);

    let w = single(ParamKind::Weight, vec![2.0, 1.0]);
    let eps = asam_perturbation(&w, &[Tensor::vector(vec![1.0, 1.0])], 1.0, 0.0);
    let s5 = 5f64.sqrt();
    assert!((eps[0].data()[0] - 4.0 / s5).abs() < 1e-12);
    assert!((eps[0].data()[1] - 1.0 / s5).abs() < 1e-12);
}

/// One SAM or ASAM step on `L(w) = w^2 / 2`.
fn quadratic_step(adaptive: bool, w0: f64) -> f64 {
    let mut p = single(ParamKind::Weight, vec![w0]);
    let grad = |p: &ParamSet| vec![p.tensor(0).clone()];
    let b = base(0.1, 0.0, 0.0);
    if adaptive {
        let mut o = Asam::new(AsamConfig { rho: 0.5, eta: 0.0, base: b }).unwrap();
        let g = grad(&p);
        o.perturb(&mut p, &g).unwrap();
        let g = grad(&p);
        o.update(&mut p, &g).unwrap();
    } else {
        let mut o = Sam::new(SamConfig { rho: 0.5, base: b }).unwrap();
        let g = grad(&p);
        o.perturb(&mut p, &g).unwrap();
        let g = grad(&p);
        o.update(&mut p, &g).unwrap();
    }
    p.tensor(0).data()[0]
}

#[test]
fn one_dimensional_quadratic_steps() {
    assert!((quadratic_step(false, 2.0) - 1.75).abs() < 1e-12);
    assert!((quadratic_step(true, 2.0) - 1.7).abs() < 1e-12);
}

#[test]
fn gradient_direction_maximizes_quadratic_on_sphere() {
    let rho = 0.1;
    let w = [1.0, 0.0];
    let loss = |e: [f64; 2]| 0.5 * ((w[0] + e[0]).powi(2) + (w[1] + e[1]).powi(2));
    let eps = sam_perturbation(&[Tensor::vector(w.to_vec())], rho);
    let best = loss([eps[0].data()[0], eps[0].data()[1]]);
    let mut r = rng(5);
    for _ in 0..1000 {
        let a: f64 = r.random_range(0.0..std::f64::consts::TAU);
        let other = loss([rho * a.cos(), rho * a.sin()]);
        assert!(best >= other - 1e-15, "{best} < {other}");
    }
}

#[test]
fn asam_direction_maximizes_linear_gain_on_ellipsoid() {
    let model = random_mlp(&[3, 4, 2], true, 8);
    let (x, y) = random_batch(6, 3, 2, 9);
    let (_, g) = model.eval_loss_and_grads_with(model.params(), &x, &y).unwrap();
    let eta = 0.01;
    let rho = 0.5;
    let eps = asam_perturbation(model.params(), &g, rho, eta);
    let ops = rescaling_operator(model.params(), eta);
    let gain = dot(&g, &eps);
    let mut r = rng(10);
    for _ in 0..1000 {
        let mut u: Vec<Tensor> = g
            .iter()
            .map(|t| Tensor::new(t.shape().to_vec(), (0..t.numel()).map(|_| StandardNormal.sample(&mut r)).collect()).unwrap())
            .collect();
        let n = norm(&u);
        for (ui, ti) in u.iter_mut().zip(&ops) {
            for (v, s) in ui.data_mut().iter_mut().zip(ti.data()) {
                *v *= rho / n * s;
            }
        }
        assert!(gain >= dot(&g, &u) - 1e-12);
    }
}

#[test]
fn asam_perturbation_is_scale_equivariant() {
    let model = random_mlp(&[3, 6, 5, 2], false, 21);
    let rescaled = rectifier_rescale(&model, 0, 10.0).unwrap();
    let (x, y) = random_batch(10, 3, 2, 22);
    let (_, g) = model.eval_loss_and_grads_with(model.params(), &x, &y).unwrap();
    let (_, g2) = rescaled.eval_loss_and_grads_with(rescaled.params(), &x, &y).unwrap();
    let e = asam_perturbation(model.params(), &g, 0.5, 0.0);
    let e2 = asam_perturbation(rescaled.params(), &g2, 0.5, 0.0);
    let scale = [10.0, 0.1, 1.0];
    for ((a, b), s) in e.iter().zip(&e2).zip(scale) {
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p * s - q).abs() <= 1e-9 * q.abs().max(1e-12), "{} vs {q}", p * s);
        }
    }
}

#[test]
fn weight_decay_shrinks_identically() {
    let w = vec![1.5, -0.5, 0.25];
    let zero = vec![Tensor::vector(vec![0.0; 3])];
    let cfg = base(0.1, 0.9, 0.05);
    let mut a = single(ParamKind::Weight, w.clone());
    let mut b = a.clone();
    let mut c = a.clone();
    let mut sgd = Sgd::new(cfg).unwrap();
    let mut sam = Sam::new(SamConfig { rho: 0.05, base: cfg }).unwrap();
    let mut asam = Asam::new(AsamConfig { rho: 0.5, eta: 0.01, base: cfg }).unwrap();
    for _ in 0..10 {
        sgd.step(&mut a, &zero).unwrap();
        sam.perturb(&mut b, &zero).unwrap();
        sam.update(&mut b, &zero).unwrap();
        asam.perturb(&mut c, &zero).unwrap();
        asam.update(&mut c, &zero).unwrap();
    }
    assert!(a.bit_eq(&b) && a.bit_eq(&c));
    assert!(a.tensor(0).data()[0] < 1.5);
}

#[test]
fn bias_only_asam_matches_sam() {
    let mut p = ParamSet::new();
    p.push("b0", ParamKind::Bias, Tensor::vector(vec![0.3, -1.2, 2.0])).unwrap();
    p.push("b1", ParamKind::BnShift, Tensor::vector(vec![0.7])).unwrap();
    let mut q = p.clone();
    let grad = |p: &ParamSet| -> Vec<Tensor> { p.tensors().map(|t| t.map(|v| v.powi(3) - v)).collect() };
    let cfg = base(0.05, 0.9, 1e-3);
    let mut sam = Sam::new(SamConfig { rho: 0.2, base: cfg }).unwrap();
    let mut asam = Asam::new(AsamConfig { rho: 0.2, eta: 0.01, base: cfg }).unwrap();
    for _ in 0..50 {
        let g = grad(&p);
        sam.perturb(&mut p, &g).unwrap();
        let g = grad(&p);
        sam.update(&mut p, &g).unwrap();
        let g = grad(&q);
        asam.perturb(&mut q, &g).unwrap();
        let g = grad(&q);
        asam.update(&mut q, &g).unwrap();
        assert!(p.bit_eq(&q));
    }
}

#[test]
fn passes_per_step_are_counted() {
    let cfg = base(0.05, 0.0, 0.0);
    for (opt, passes) in [
        (Optimizer::Sgd(Sgd::new(cfg).unwrap()), 1),
        (Optimizer::Sam(Sam::new(SamConfig { rho: 0.05, base: cfg }).unwrap()), 2),
        (Optimizer::Asam(Asam::new(AsamConfig { rho: 0.5, eta: 0.01, base: cfg }).unwrap()), 2),
    ] {
        let mut model = random_mlp(&[3, 4, 3], true, 1);
        let mut opt = opt;
        for s in 0..7 {
            let (x, y) = random_batch(4, 3, 3, s);
            opt.step(&mut model, &x, &y).unwrap();
            assert_eq!(model.grad_evals(), passes * (s + 1));
        }
        // Evaluation never counts.
        let (x, y) = random_batch(4, 3, 3, 99);
        model.evaluate(&x, &y, 2).unwrap();
        model.eval_loss_and_grads_with(model.params(), &x, &y).unwrap();
        model.forward(&x, Mode::Eval).unwrap();
        assert_eq!(model.grad_evals(), passes * 7);
    }
}
