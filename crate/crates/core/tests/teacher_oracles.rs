mod common;

use common::*;
use distillforge::metrics::r2;
use distillforge::teacher::{adam_step, train, AdamState, TeacherConfig, TeacherModel};
use distillforge::Matrix;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn gradient_matches_finite_differences_on_20_instances() {
    let mut rng = rng(2024);
    let lambdas = [0.0, 0.1, 1.0];
    for case in 0..20 {
        let d = rng.random_range(1..=4);
        let m = rng.random_range(1..=6);
        let n = rng.random_range(1..=10);
        let lambda = lambdas[case % 3];
        // 1e-2 keeps every ±h perturbation on the same side of each ReLU kink.
        let (model, x, y) = random_instance(&mut rng, d, m, n, 1e-2);
        let analytic = model.grad_total_loss(&x, &y, lambda).unwrap();
        let numeric = central_diff(model.params(), 1e-5, |p| {
            with_params(d, m, p).total_loss(&x, &y, lambda).unwrap()
        });
        for (k, (a, b)) in analytic.params().iter().zip(&numeric).enumerate() {
            assert!(
                rel_err(*a, *b) <= 1e-5,
                "case {case} (d={d} m={m} n={n} lambda={lambda}) coord {k}: {a} vs {b}"
            );
        }
    }
}

#[test]
fn gradient_example_d3_m4_n8() {
    let mut rng = rng(11);
    let (model, x, y) = random_instance(&mut rng, 3, 4, 8, 1e-3);
    let analytic = model.grad_total_loss(&x, &y, 0.3).unwrap();
    let numeric = central_diff(model.params(), 1e-5, |p| {
        with_params(3, 4, p).total_loss(&x, &y, 0.3).unwrap()
    });
    for (a, b) in analytic.params().iter().zip(&numeric) {
        assert!(rel_err(*a, *b) <= 1e-5, "{a} vs {b}");
    }
}

#[test]
fn zero_output_weights_give_no_penalty_gradient_on_w1() {
    let mut rng = rng(5);
    let (model, x, y) = random_instance(&mut rng, 3, 4, 6, 1e-3);
    let mut p = model.params().to_vec();
    let (d, m) = (3, 4);
    for w in &mut p[m * d + m..m * d + 2 * m] {
        *w = 0.0;
    }
    let model = with_params(d, m, &p);
    assert_eq!(model.jacobian_penalty(&x).unwrap(), 0.0);
    let g0 = model.grad_total_loss(&x, &y, 0.0).unwrap();
    let g1 = model.grad_total_loss(&x, &y, 5.0).unwrap();
    assert_eq!(g0.w1(), g1.w1());
}

#[test]
fn penalty_is_linear_regime_closed_form() {
    let mut rng = rng(3);
    for _ in 0..10 {
        let (d, m, n) = (3, 5, 7);
        let w1: Vec<f64> = (0..m * d).map(|_| rng.random_range(-0.5..0.5)).collect();
        // Large positive biases keep every unit active on inputs in [-1, 1].
        let b1: Vec<f64> = (0..m).map(|_| rng.random_range(3.0..4.0)).collect();
        let w2: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let model = TeacherModel::from_parts(d, m, &w1, &b1, &w2, 0.2).unwrap();
        let x = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect());
        assert!(min_abs_preactivation(&model, &x) > 0.0);
        let expected: f64 = (0..d)
            .map(|k| (0..m).map(|j| w2[j] * w1[j * d + k]).sum::<f64>().powi(2))
            .sum();
        let got = model.jacobian_penalty(&x).unwrap();
        assert!((got - expected).abs() <= 1e-10 * expected.max(1.0), "{got} vs {expected}");
    }
}

#[test]
fn jacobian_matches_finite_differences_of_forward() {
    let model = TeacherModel::he_init(3, 5, 7);
    let mut rng = rng(7);
    let mut checked = 0;
    while checked < 10 {
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        if preactivations(&model, &x).iter().any(|z| z.abs() < 1e-3) {
            continue;
        }
        let jac = model.jacobian(&x).unwrap();
        let fd = central_diff(&x, 1e-5, |p| model.forward(p).unwrap());
        for (a, b) in jac.iter().zip(&fd) {
            assert!(rel_err(*a, *b) <= 1e-6, "{a} vs {b}");
        }
        checked += 1;
    }
}

#[test]
fn adam_matches_reference_on_scalar_quadratic() {
    // f(θ) = 1.5 (θ - 0.7)^2
    let grad = |t: f64| 3.0 * (t - 0.7);
    let lr = 0.05;
    let mut reference = ReferenceAdam::new(lr);
    let mut theta_ref = -1.3;
    let mut model = TeacherModel::from_parts(1, 1, &[0.0], &[0.0], &[0.0], -1.3).unwrap();
    let mut state = AdamState::for_model(&model);
    for step in 1..=10 {
        let g = grad(model.b2());
        let mut gm = TeacherModel::zeros(1, 1);
        gm.set_b2(g);
        let (next, next_state) = adam_step(&model, &gm, &state, lr).unwrap();
        theta_ref = reference.step(theta_ref, grad(theta_ref));
        assert_eq!(next_state.t, step);
        assert!((next.b2() - theta_ref).abs() <= 1e-12, "step {step}: {} vs {theta_ref}", next.b2());
        assert!(next_state.second_moment.iter().all(|v| *v >= 0.0));
        model = next;
        state = next_state;
    }
}

fn linear_data(n: usize, seed: u64) -> (Matrix, Vec<f64>) {
    let mut rng = rng(seed);
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(-1.7..1.7)).collect();
    let y = raw.iter().map(|v| 2.0 * v + 1.0).collect();
    (Matrix::from_vec(n, 1, raw), y)
}

#[test]
fn teacher_fits_a_noiseless_line() {
    let (x, y) = linear_data(512, 1);
    let (model, stats) = train(&x, &y, &TeacherConfig::default()).unwrap();
    let fit = r2(&y, &model.predict_batch(&x).unwrap()).unwrap();
    assert!(fit >= 0.99, "train r2 {fit}");
    assert_eq!(stats.loss_history.len(), 100);
    assert!(stats.wall_time_seconds > 0.0);
}

#[test]
fn huge_lambda_flattens_the_teacher() {
    let (x, y) = linear_data(512, 1);
    // Adam at lr 1e-3 only damps the penalty slowly; 100 epochs leaves it near 0.3.
    let cfg = TeacherConfig {
        lambda: 1e6,
        epochs: 1000,
        ..TeacherConfig::default()
    };
    let (model, _) = train(&x, &y, &cfg).unwrap();
    let pen = model.jacobian_penalty(&x).unwrap();
    let fit = r2(&y, &model.predict_batch(&x).unwrap()).unwrap();
    assert!(pen < 1e-3, "penalty {pen}");
    assert!(fit.abs() < 0.1, "train r2 {fit}");
}

#[test]
fn training_is_deterministic() {
    let (x, y) = linear_data(200, 2);
    let cfg = TeacherConfig {
        epochs: 20,
        lambda: 0.1,
        seed: 9,
        ..TeacherConfig::default()
    };
    let (m1, s1) = train(&x, &y, &cfg).unwrap();
    let (m2, s2) = train(&x, &y, &cfg).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(s1.loss_history, s2.loss_history);
    let (m3, _) = train(&x, &y, &TeacherConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(m1, m3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn penalty_invariant_under_row_permutation_and_duplication(seed in 0u64..10_000, n in 1usize..8) {
        let mut r = rng(seed);
        let (model, x, _) = random_instance(&mut r, 3, 4, n, 0.0);
        let p = model.jacobian_penalty(&x).unwrap();
        let mut rows: Vec<Vec<f64>> = x.iter_rows().map(|r| r.to_vec()).collect();
        rows.reverse();
        let rev = Matrix::from_vec(n, 3, rows.concat());
        let dup = Matrix::from_vec(2 * n, 3, [rows.concat(), rows.concat()].concat());
        prop_assert!((model.jacobian_penalty(&rev).unwrap() - p).abs() <= 1e-12 * p.max(1.0));
        prop_assert!((model.jacobian_penalty(&dup).unwrap() - p).abs() <= 1e-12 * p.max(1.0));
    }

    #[test]
    fn total_loss_is_affine_in_lambda(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let (model, x, y) = random_instance(&mut r, 2, 3, 5, 0.0);
        let mse = model.mse_loss(&x, &y).unwrap();
        let pen = model.jacobian_penalty(&x).unwrap();
        prop_assert_eq!(model.total_loss(&x, &y, 0.0).unwrap(), mse);
        for lam in [0.5, 1.0, 3.0] {
            let t = model.total_loss(&x, &y, lam).unwrap();
            prop_assert!((t - (mse + lam * pen)).abs() <= 1e-12 * t.abs().max(1.0));
        }
    }

    #[test]
    fn predict_batch_commutes_with_row_permutation(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let (model, x, _) = random_instance(&mut r, 2, 3, 6, 0.0);
        let pred = model.predict_batch(&x).unwrap();
        let idx = [5usize, 3, 1, 0, 2, 4];
        let perm = x.select_rows(&idx);
        let ppred = model.predict_batch(&perm).unwrap();
        for (k, &i) in idx.iter().enumerate() {
            prop_assert_eq!(ppred[k], pred[i]);
        }
    }
}
