//! Acceptance checks, one PASS/FAIL line each. Runs without the libtest harness.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use common::*;
use distillforge::data::{snr_proxy, split, BundledDataset, Dataset, Scaler};
use distillforge::dtree::{fit_xy, TreeConfig};
use distillforge::harness::{sweep, tree_experiment, ExperimentConfig};
use distillforge::metrics::{median, r2, relative_improvement};
use distillforge::symreg::{evolve, random_tree, DistillationSet, ExprTree, GPConfig, InitMethod};
use distillforge::teacher::{adam_step, train, AdamState, TeacherConfig, TeacherModel};
use distillforge::Matrix;
use rand::Rng;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn data_dir() -> &'static str {
    concat!(env!("CARGO_MANIFEST_DIR"), "/../../data")
}

fn bundled(key: &str) -> Dataset {
    BundledDataset::lookup(key).unwrap().load_from(data_dir()).unwrap()
}

fn acceptance_config(dataset: &str) -> ExperimentConfig {
    ExperimentConfig {
        dataset: dataset.into(),
        data_dir: data_dir().into(),
        seeds: vec![42, 43, 44],
        ..ExperimentConfig::default()
    }
}

fn gradient_fd() -> Check {
    let mut rng = rng(2024);
    let lambdas = [0.0, 0.1, 1.0];
    let mut worst: f64 = 0.0;
    for case in 0..20 {
        let (d, m, n) = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=10));
        let lambda = lambdas[case % 3];
        let (model, x, y) = random_instance(&mut rng, d, m, n, 1e-2);
        let g = model.grad_total_loss(&x, &y, lambda).map_err(|e| e.to_string())?;
        let fd = central_diff(model.params(), 1e-5, |p| with_params(d, m, p).total_loss(&x, &y, lambda).unwrap());
        for (a, b) in g.params().iter().zip(&fd) {
            worst = worst.max(rel_err(*a, *b));
        }
    }
    ensure!(worst <= 1e-5, "max relative error {worst:.2e}");
    Ok(format!("max relative error {worst:.2e}"))
}

fn jacobian_closed_form() -> Check {
    let mut rng = rng(3);
    let mut worst_pen: f64 = 0.0;
    for _ in 0..10 {
        let (d, m, n) = (3, 5, 7);
        let w1: Vec<f64> = (0..m * d).map(|_| rng.random_range(-0.5..0.5)).collect();
        let b1: Vec<f64> = (0..m).map(|_| rng.random_range(3.0..4.0)).collect();
        let w2: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let model = TeacherModel::from_parts(d, m, &w1, &b1, &w2, 0.0).unwrap();
        let x = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect());
        ensure!(min_abs_preactivation(&model, &x) > 0.0, "instance left the linear regime");
        let want: f64 = (0..d)
            .map(|k| (0..m).map(|j| w2[j] * w1[j * d + k]).sum::<f64>().powi(2))
            .sum();
        let got = model.jacobian_penalty(&x).unwrap();
        worst_pen = worst_pen.max((got - want).abs());
    }
    ensure!(worst_pen <= 1e-10, "penalty off by {worst_pen:.2e}");

    let model = TeacherModel::he_init(3, 5, 7);
    let mut worst_jac: f64 = 0.0;
    let mut checked = 0;
    while checked < 10 {
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        if preactivations(&model, &x).iter().any(|z| z.abs() < 1e-3) {
            continue;
        }
        let jac = model.jacobian(&x).unwrap();
        let fd = central_diff(&x, 1e-5, |p| model.forward(p).unwrap());
        for (a, b) in jac.iter().zip(&fd) {
            worst_jac = worst_jac.max(rel_err(*a, *b));
        }
        checked += 1;
    }
    ensure!(worst_jac <= 1e-6, "jacobian relative error {worst_jac:.2e}");
    Ok(format!("penalty abs err {worst_pen:.1e}, jacobian rel err {worst_jac:.1e}"))
}

fn adam_oracle() -> Check {
    let grad = |t: f64| 3.0 * (t - 0.7);
    let lr = 0.05;
    let mut reference = ReferenceAdam::new(lr);
    let mut theta = -1.3;
    let mut model = TeacherModel::from_parts(1, 1, &[0.0], &[0.0], &[0.0], theta).unwrap();
    let mut state = AdamState::for_model(&model);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let mut g = TeacherModel::zeros(1, 1);
        g.set_b2(grad(model.b2()));
        let (next, s) = adam_step(&model, &g, &state, lr).map_err(|e| e.to_string())?;
        theta = reference.step(theta, grad(theta));
        worst = worst.max((next.b2() - theta).abs());
        model = next;
        state = s;
    }
    ensure!(worst <= 1e-12, "max deviation {worst:.2e}");
    Ok(format!("max deviation over 10 steps {worst:.1e}"))
}

fn gp_recovery() -> Check {
    let t0 = Instant::now();
    let mut r = rng(0);
    let data: Vec<f64> = (0..1500).map(|_| r.random_range(-1.0..1.0)).collect();
    let x = Matrix::from_vec(500, 3, data);
    let y = x.iter_rows().map(|v| (v[0] + v[1]) * v[2]).collect();
    let ds = DistillationSet::new(x, y).unwrap();
    let mut scores = Vec::new();
    for seed in 1..=5 {
        let res = evolve(&ds, &GPConfig { seed, ..GPConfig::default() }).map_err(|e| e.to_string())?;
        ensure!(res.generations_run <= 30, "seed {seed} ran {} generations", res.generations_run);
        scores.push(res.r2_on_distillation_set);
    }
    let m = median(&scores);
    let secs = t0.elapsed().as_secs_f64();
    ensure!(m >= 0.99, "median R² {m:.4} ({scores:?})");
    ensure!(secs < 120.0, "took {secs:.1}s");
    Ok(format!("median R² {m:.4} in {secs:.1}s"))
}

fn concrete_headline() -> Check {
    let t0 = Instant::now();
    let cfg = acceptance_config("concrete");
    let r = sweep(&bundled("concrete"), &cfg);
    ensure!(r.rows.iter().all(|x| x.ok()), "some runs failed");
    let base = &r.per_lambda[0];
    let teacher = base.median_teacher_r2_test;
    let b = r.best.as_ref().ok_or("no best-λ summary")?;
    let msg = format!(
        "teacher R² {teacher:.3}; student R² at λ=0 {:.3}, best λ={} {:.3} (Δ {:+.3}) in {:.0}s",
        b.baseline_student_r2,
        b.best_lambda,
        b.best_student_r2,
        b.improvement_abs,
        t0.elapsed().as_secs_f64()
    );
    ensure!((0.75..=0.92).contains(&teacher), "{msg}");
    ensure!(b.improvement_abs >= 0.10, "{msg}");
    Ok(msg)
}

fn wine_null() -> Check {
    let cfg = acceptance_config("wine_red");
    let r = sweep(&bundled("wine_red"), &cfg);
    ensure!(r.rows.iter().all(|x| x.ok()), "some runs failed");
    let b = r.best.as_ref().ok_or("no best-λ summary")?;
    let msg = format!(
        "student R² at λ=0 {:.3}, best λ={} {:.3} (Δ {:+.3})",
        b.baseline_student_r2, b.best_lambda, b.best_student_r2, b.improvement_abs
    );
    ensure!(b.improvement_abs.abs() <= 0.05, "{msg}");
    Ok(msg)
}

fn snr() -> Check {
    let t0 = Instant::now();
    let c = snr_proxy(&bundled("concrete")).map_err(|e| e.to_string())?.snr;
    let w = snr_proxy(&bundled("wine_red")).map_err(|e| e.to_string())?.snr;
    let secs = t0.elapsed().as_secs_f64();
    let msg = format!("concrete {c:.3}, wine {w:.3} in {secs:.2}s");
    ensure!((c - 2.60).abs() <= 0.25 && (w - 1.56).abs() <= 0.25 && c > w, "{msg}");
    ensure!(secs < 1.0, "{msg}");
    Ok(msg)
}

fn tree_null() -> Check {
    let cfg = acceptance_config("concrete");
    let r = tree_experiment(&bundled("concrete"), cfg.tree_lambda, &cfg);
    ensure!(r.rows.iter().all(|x| x.status == "ok"), "some runs failed");
    let std = &r.summary[0];
    let leaves = r.summary.iter().filter_map(|s| s.max_leaves).max().unwrap_or(0);
    let msg = format!(
        "standard tree R² {:.3}, regularized {:.3} (Δ {:+.3}), max leaves {leaves}",
        std.median_student_r2_test, r.summary[1].median_student_r2_test, r.delta_r2
    );
    ensure!(r.delta_r2.abs() <= 0.05, "{msg}");
    ensure!(leaves <= 32, "{msg}");
    ensure!((std.median_student_r2_test - 0.709).abs() <= 0.10, "{msg}");
    Ok(msg)
}

fn tree_oracle() -> Check {
    for seed in 0..20 {
        let mut r = rng(seed);
        let n = r.random_range(2..=12);
        let d = r.random_range(1..=2);
        let x = Matrix::from_vec(n, d, (0..n * d).map(|_| r.random_range(0..5) as f64).collect());
        let y: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        let leaves = r.random_range(2..=3);
        let t = fit_xy(&x, &y, &TreeConfig { max_leaves: leaves, ..TreeConfig::default() }).map_err(|e| e.to_string())?;
        let got: f64 = t.predict(&x).unwrap().iter().zip(&y).map(|(p, v)| (p - v) * (p - v)).sum();
        let want = best_first_sse(&x, &y, leaves);
        ensure!((got - want).abs() <= 1e-9 * want.max(1.0), "instance {seed}: {got} vs oracle {want}");
    }
    Ok("20 instances match exhaustive best-first SSE".into())
}

fn overhead() -> Check {
    let ds = bundled("concrete");
    let sp = split(&ds, 0.2, 42).unwrap();
    let tr = ds.subset(&sp.train);
    let x = Scaler::fit(&ds.x, &sp.train).unwrap().transform(&tr.x);
    let time = |lambda: f64| -> f64 {
        let secs: Vec<f64> = (0..3)
            .map(|_| {
                let cfg = TeacherConfig { lambda, seed: 42, ..TeacherConfig::default() };
                train(&x, &tr.y, &cfg).unwrap().1.wall_time_seconds
            })
            .collect();
        median(&secs)
    };
    let plain = time(0.0);
    let reg = time(0.1);
    let msg = format!("λ=0 {plain:.3}s, λ=0.1 {reg:.3}s ({:.1}x)", reg / plain);
    ensure!(reg > plain, "{msg}");
    Ok(msg)
}

fn payload(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| !matches!(p.file_name().unwrap().to_str(), Some("metadata.json" | "timings.csv")))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn determinism() -> Check {
    let bin = env!("CARGO_BIN_EXE_distillforge");
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = tmp.path().join("c.toml");
    let text = format!(
        "dataset = \"concrete\"\ndata_dir = \"{}\"\nseeds = [1, 2]\nlambda_grid = [0.0, 0.1]\nsigma_grid = [0.0, 0.2]\n\n\
         [teacher]\nepochs = 5\nhidden_width = 16\n\n[gp]\npopulation_size = 80\ngenerations = 3\n",
        data_dir()
    );
    fs::write(&cfg, text).unwrap();
    let cfg = cfg.to_str().unwrap();
    let run = |args: &[&str]| -> Result<Vec<u8>, String> {
        let o = Command::new(bin).args(args).output().map_err(|e| e.to_string())?;
        if !o.status.success() {
            return Err(format!("{args:?}: {}", String::from_utf8_lossy(&o.stderr)));
        }
        Ok(o.stdout)
    };
    let p = |s: &str| tmp.path().join(s).to_str().unwrap().to_string();
    let mut checked = Vec::new();

    for cmd in ["sweep", "ablate-noise", "tree-compare", "demo-gap"] {
        let out = p(cmd);
        let mut runs = Vec::new();
        for _ in 0..2 {
            let mut args = vec![cmd, "--config", cfg, "--out-dir", &out];
            if cmd == "demo-gap" {
                args.extend(["--n", "200"]);
            }
            run(&args)?;
            runs.push(payload(Path::new(&out)));
        }
        ensure!(runs[0] == runs[1], "{cmd} payload differs");
        checked.push(cmd);
    }

    let mut files = Vec::new();
    for k in 0..2 {
        let model = p(&format!("model{k}.json"));
        run(&["train", "--config", cfg, "--lambda", "0.1", "--seed", "7", "--out", &model])?;
        let mut set = vec![fs::read(&model).unwrap()];
        for student in ["sr", "tree"] {
            let out = p(&format!("{student}{k}.json"));
            run(&["distill", "--config", cfg, "--model", &model, "--student", student, "--out", &out])?;
            set.push(fs::read(&out).unwrap());
        }
        files.push(set);
    }
    ensure!(files[0] == files[1], "train/distill output differs");
    checked.extend(["train", "distill"]);

    let snr = ["snr", "--data", "concrete", "wine_red", "--data-dir", data_dir()];
    ensure!(run(&snr)? == run(&snr)?, "snr output differs");
    checked.push("snr");
    Ok(format!("identical payloads: {}", checked.join(", ")))
}

fn metrics_and_round_trip() -> Check {
    let y = [1.0, 2.0, 3.0, 4.0];
    ensure!(r2(&y, &y).unwrap() == 1.0, "perfect prediction");
    ensure!(r2(&y, &[2.5; 4]).unwrap() == 0.0, "mean predictor");
    ensure!(r2(&y, &[1.0, 2.0, 3.0, 5.0]).unwrap() == 0.8, "1 - 1/5");
    ensure!(r2(&[3.0; 4], &y).is_err(), "constant target must be an error");
    ensure!(relative_improvement(0.10, 0.60).unwrap() == 500.0, "0.10 -> 0.60");
    ensure!(relative_improvement(0.3, 0.3).unwrap() == 0.0, "no change");
    let p = relative_improvement(0.39, 0.45).unwrap();
    ensure!(format!("{p:.1}") == "15.4", "0.39 -> 0.45 gave {p}");
    ensure!(relative_improvement(0.0, 0.5).is_err(), "zero base must be an error");

    let cfg = GPConfig::default();
    let mut r = rng(77);
    for k in 0..100 {
        let method = if k % 2 == 0 { InitMethod::Full } else { InitMethod::Grow };
        let t = random_tree(&cfg, 5, &mut r, method);
        let text = t.format_prefix();
        ensure!(ExprTree::parse(&text).ok().as_ref() == Some(&t), "round trip failed for {text}");
    }
    Ok("metric examples exact; 100 trees round-trip".into())
}

fn main() {
    let criteria: [(&str, fn() -> Check); 12] = [
        ("gradient matches finite differences", gradient_fd),
        ("jacobian closed form and finite differences", jacobian_closed_form),
        ("adam matches reference", adam_oracle),
        ("gp recovers planted formula", gp_recovery),
        ("concrete regularization gain", concrete_headline),
        ("wine null result", wine_null),
        ("snr proxy", snr),
        ("tree null result", tree_null),
        ("tree matches exhaustive oracle", tree_oracle),
        ("penalty costs wall time", overhead),
        ("cli determinism", determinism),
        ("metrics and formula round trip", metrics_and_round_trip),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("[PASS] {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
