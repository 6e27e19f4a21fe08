use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{snr_proxy, Dataset, SnrReport};
use crate::dtree::fit_tree;
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::pipeline::{
    distill_symbolic, run_pipeline_noisy, run_tree_pipeline, train_teacher_stage, PipelineOutcome,
    TreeOutcome,
};
use crate::matrix::Matrix;
use crate::metrics::{median, r2, relative_improvement};

/// One grid point of a sweep or ablation. Failed runs carry NaN metrics and the error text.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRow {
    pub dataset: String,
    pub sigma: f64,
    pub lambda: f64,
    pub seed: u64,
    pub status: String,
    pub teacher_r2_train: f64,
    pub teacher_r2_test: f64,
    pub student_r2_test: f64,
    pub fidelity_r2: f64,
    pub node_count: Option<usize>,
    pub formula: String,
    pub error: Option<String>,
}

impl RunRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }

    fn from_outcome(sigma: f64, out: &PipelineOutcome) -> Self {
        let r = &out.row;
        Self {
            dataset: r.dataset.clone(),
            sigma,
            lambda: r.lambda,
            seed: r.seed,
            status: "ok".into(),
            teacher_r2_train: r.teacher_r2_train,
            teacher_r2_test: r.teacher_r2_test,
            student_r2_test: r.student_r2_test,
            fidelity_r2: r.fidelity_r2,
            node_count: Some(out.student.node_count()),
            formula: r.formula.clone(),
            error: None,
        }
    }

    fn failed(dataset: &str, sigma: f64, lambda: f64, seed: u64, err: &Error) -> Self {
        Self {
            dataset: dataset.into(),
            sigma,
            lambda,
            seed,
            status: "failed".into(),
            teacher_r2_train: f64::NAN,
            teacher_r2_test: f64::NAN,
            student_r2_test: f64::NAN,
            fidelity_r2: f64::NAN,
            node_count: None,
            formula: String::new(),
            error: Some(err.to_string()),
        }
    }
}

/// Wall-clock measurements, kept out of the deterministic payload.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub variant: String,
    pub sigma: f64,
    pub lambda: f64,
    pub seed: u64,
    pub teacher_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LambdaSummary {
    pub sigma: f64,
    pub lambda: f64,
    pub runs_ok: usize,
    pub median_teacher_r2_test: f64,
    pub median_student_r2_test: f64,
    pub median_fidelity_r2: f64,
}

/// Best regularized λ against the λ = 0 baseline, both as medians over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BestLambda {
    pub sigma: f64,
    pub baseline_lambda: f64,
    pub baseline_student_r2: f64,
    pub best_lambda: f64,
    pub best_student_r2: f64,
    pub improvement_abs: f64,
    /// Absent when the baseline R² is not positive.
    pub improvement_percent: Option<f64>,
    /// Median over seeds of each seed's own best λ > 0.
    pub per_seed_best_median: f64,
}

fn sorted_unique(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v.dedup();
    v
}

/// Per-λ medians and the best-λ row for a block of rows sharing one σ.
///
/// The baseline is λ = 0 (the smallest λ when 0 is not in the grid); "best" ranges over
/// the remaining λ values and ties keep the smaller λ.
pub fn summarize(rows: &[RunRow], sigma: f64) -> (Vec<LambdaSummary>, Option<BestLambda>) {
    let lambdas = sorted_unique(rows.iter().map(|r| r.lambda).collect());
    let per: Vec<LambdaSummary> = lambdas
        .iter()
        .map(|&l| {
            let ok: Vec<&RunRow> = rows.iter().filter(|r| r.lambda == l && r.ok()).collect();
            let m = |f: fn(&RunRow) -> f64| median(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
            LambdaSummary {
                sigma,
                lambda: l,
                runs_ok: ok.len(),
                median_teacher_r2_test: m(|r| r.teacher_r2_test),
                median_student_r2_test: m(|r| r.student_r2_test),
                median_fidelity_r2: m(|r| r.fidelity_r2),
            }
        })
        .collect();
    let Some((base, rest)) = per.split_first() else {
        return (per, None);
    };
    let mut best: Option<&LambdaSummary> = None;
    for s in rest.iter().filter(|s| s.median_student_r2_test.is_finite()) {
        if best.is_none_or(|b| s.median_student_r2_test > b.median_student_r2_test) {
            best = Some(s);
        }
    }
    let Some(best) = best else {
        return (per.clone(), None);
    };
    let seeds: Vec<u64> = {
        let mut s: Vec<u64> = rows.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    let per_seed: Vec<f64> = seeds
        .iter()
        .map(|&s| {
            rows.iter()
                .filter(|r| r.seed == s && r.lambda != base.lambda && r.ok())
                .map(|r| r.student_r2_test)
                .fold(f64::NAN, f64::max)
        })
        .collect();
    let b = base.median_student_r2_test;
    let summary = BestLambda {
        sigma,
        baseline_lambda: base.lambda,
        baseline_student_r2: b,
        best_lambda: best.lambda,
        best_student_r2: best.median_student_r2_test,
        improvement_abs: best.median_student_r2_test - b,
        improvement_percent: relative_improvement(b, best.median_student_r2_test).ok(),
        per_seed_best_median: median(&per_seed),
    };
    (per, Some(summary))
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub config: ExperimentConfig,
    pub dataset: String,
    pub rows: Vec<RunRow>,
    pub per_lambda: Vec<LambdaSummary>,
    pub best: Option<BestLambda>,
    #[serde(skip)]
    pub timings: Vec<TimingRow>,
}

fn run_grid(
    ds: &Dataset,
    sigma: f64,
    lambdas: &[f64],
    cfg: &ExperimentConfig,
) -> (Vec<RunRow>, Vec<TimingRow>) {
    let points: Vec<(f64, u64)> = lambdas
        .iter()
        .flat_map(|&l| cfg.seeds.iter().map(move |&s| (l, s)))
        .collect();
    // Collected in grid order whatever the completion order.
    let results: Vec<(RunRow, Option<TimingRow>)> = points
        .par_iter()
        .map(|&(lambda, seed)| match run_pipeline_noisy(ds, lambda, seed, sigma, cfg) {
            Ok(out) => (
                RunRow::from_outcome(sigma, &out),
                Some(TimingRow {
                    variant: "symbolic".into(),
                    sigma,
                    lambda,
                    seed,
                    teacher_seconds: out.row.train_seconds,
                    total_seconds: out.total_seconds,
                }),
            ),
            Err(e) => (RunRow::failed(&ds.name, sigma, lambda, seed, &e), None),
        })
        .collect();
    let mut rows = Vec::with_capacity(results.len());
    let mut timings = Vec::new();
    for (r, t) in results {
        rows.push(r);
        timings.extend(t);
    }
    (rows, timings)
}

/// Symbolic distillation for every (λ, seed) in the config; rows sorted by λ then seed.
pub fn sweep(ds: &Dataset, cfg: &ExperimentConfig) -> SweepReport {
    let lambdas = sorted_unique(cfg.lambda_grid.clone());
    let (rows, timings) = run_grid(ds, 0.0, &lambdas, cfg);
    let (per_lambda, best) = summarize(&rows, 0.0);
    SweepReport {
        config: cfg.clone(),
        dataset: ds.name.clone(),
        rows,
        per_lambda,
        best,
        timings,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub sigma: f64,
    pub standard_student_r2: f64,
    pub best_lambda: Option<f64>,
    pub best_student_r2: Option<f64>,
    pub improvement_abs: Option<f64>,
    pub improvement_percent: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub config: ExperimentConfig,
    pub dataset: String,
    pub rows: Vec<AblationRow>,
    pub per_lambda: Vec<LambdaSummary>,
    pub runs: Vec<RunRow>,
    #[serde(skip)]
    pub timings: Vec<TimingRow>,
}

/// Label-noise ablation: for each σ, a standard (λ = 0) run and the regularized λ grid,
/// all on the same noisy train labels. Test labels stay clean.
pub fn noise_ablation(ds: &Dataset, cfg: &ExperimentConfig) -> AblationReport {
    let mut lambdas = cfg.lambda_grid.clone();
    lambdas.push(0.0);
    let lambdas = sorted_unique(lambdas);
    let mut report = AblationReport {
        config: cfg.clone(),
        dataset: ds.name.clone(),
        rows: Vec::new(),
        per_lambda: Vec::new(),
        runs: Vec::new(),
        timings: Vec::new(),
    };
    for &sigma in &cfg.sigma_grid {
        let (runs, timings) = run_grid(ds, sigma, &lambdas, cfg);
        let (per, best) = summarize(&runs, sigma);
        let standard = per.first().map_or(f64::NAN, |p| p.median_student_r2_test);
        report.rows.push(AblationRow {
            sigma,
            standard_student_r2: standard,
            best_lambda: best.as_ref().map(|b| b.best_lambda),
            best_student_r2: best.as_ref().map(|b| b.best_student_r2),
            improvement_abs: best.as_ref().map(|b| b.improvement_abs),
            improvement_percent: best.as_ref().and_then(|b| b.improvement_percent),
        });
        report.per_lambda.extend(per);
        report.runs.extend(runs);
        report.timings.extend(timings);
    }
    report
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeRow {
    pub dataset: String,
    pub variant: String,
    pub lambda: f64,
    pub seed: u64,
    pub status: String,
    pub teacher_r2_test: f64,
    pub student_r2_test: f64,
    pub fidelity_r2: f64,
    pub leaves: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TreeSummary {
    pub variant: String,
    pub lambda: f64,
    pub median_student_r2_test: f64,
    pub median_teacher_r2_test: f64,
    pub max_leaves: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TreeReport {
    pub config: ExperimentConfig,
    pub dataset: String,
    pub rows: Vec<TreeRow>,
    pub summary: Vec<TreeSummary>,
    /// Regularized minus standard median student R².
    pub delta_r2: f64,
    #[serde(skip)]
    pub timings: Vec<TimingRow>,
}

/// Tree students distilled from a standard teacher and one trained at `lambda_reg`.
pub fn tree_experiment(ds: &Dataset, lambda_reg: f64, cfg: &ExperimentConfig) -> TreeReport {
    let variants = [("standard", 0.0), ("regularized", lambda_reg)];
    let points: Vec<(&str, f64, u64)> = variants
        .iter()
        .flat_map(|&(v, l)| cfg.seeds.iter().map(move |&s| (v, l, s)))
        .collect();
    let results: Vec<(TreeRow, Option<TimingRow>)> = points
        .par_iter()
        .map(|&(variant, lambda, seed)| {
            let start = Instant::now();
            match run_tree_pipeline(ds, lambda, seed, cfg) {
                Ok(TreeOutcome {
                    teacher,
                    tree,
                    student_r2_test,
                    fidelity_r2,
                }) => (
                    TreeRow {
                        dataset: ds.name.clone(),
                        variant: variant.into(),
                        lambda,
                        seed,
                        status: "ok".into(),
                        teacher_r2_test: teacher.teacher_r2_test,
                        student_r2_test,
                        fidelity_r2,
                        leaves: Some(tree.leaf_count()),
                        error: None,
                    },
                    Some(TimingRow {
                        variant: format!("tree_{variant}"),
                        sigma: 0.0,
                        lambda,
                        seed,
                        teacher_seconds: teacher.stats.wall_time_seconds,
                        total_seconds: start.elapsed().as_secs_f64(),
                    }),
                ),
                Err(e) => (
                    TreeRow {
                        dataset: ds.name.clone(),
                        variant: variant.into(),
                        lambda,
                        seed,
                        status: "failed".into(),
                        teacher_r2_test: f64::NAN,
                        student_r2_test: f64::NAN,
                        fidelity_r2: f64::NAN,
                        leaves: None,
                        error: Some(e.to_string()),
                    },
                    None,
                ),
            }
        })
        .collect();
    let mut rows = Vec::new();
    let mut timings = Vec::new();
    for (r, t) in results {
        rows.push(r);
        timings.extend(t);
    }
    let summary: Vec<TreeSummary> = variants
        .iter()
        .map(|&(v, l)| {
            let ok: Vec<&TreeRow> = rows.iter().filter(|r| r.variant == v && r.status == "ok").collect();
            TreeSummary {
                variant: v.into(),
                lambda: l,
                median_student_r2_test: median(&ok.iter().map(|r| r.student_r2_test).collect::<Vec<_>>()),
                median_teacher_r2_test: median(&ok.iter().map(|r| r.teacher_r2_test).collect::<Vec<_>>()),
                max_leaves: ok.iter().filter_map(|r| r.leaves).max(),
            }
        })
        .collect();
    let delta_r2 = summary[1].median_student_r2_test - summary[0].median_student_r2_test;
    TreeReport {
        config: cfg.clone(),
        dataset: ds.name.clone(),
        rows,
        summary,
        delta_r2,
        timings,
    }
}

/// SNR proxies sorted by SNR, highest first. Datasets that fail carry their error.
pub fn snr_command(datasets: &[Dataset]) -> Vec<std::result::Result<SnrReport, (String, Error)>> {
    let mut out: Vec<_> = datasets
        .iter()
        .map(|ds| snr_proxy(ds).map_err(|e| (ds.name.clone(), Error::from(e))))
        .collect();
    out.sort_by(|a, b| match (a, b) {
        (Ok(x), Ok(y)) => y.snr.total_cmp(&x.snr).then_with(|| x.dataset.cmp(&y.dataset)),
        (Ok(_), Err(_)) => std::cmp::Ordering::Less,
        (Err(_), Ok(_)) => std::cmp::Ordering::Greater,
        (Err((x, _)), Err((y, _))) => x.cmp(y),
    });
    out
}

/// The 1-D function behind the gap illustration.
pub fn demo_function(x: f64) -> f64 {
    (3.0 * x).sin() + 0.3 * x * x
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DemoPoint {
    pub x: f64,
    pub y_true: f64,
    pub y_observed: f64,
    pub teacher: f64,
    pub symbolic: f64,
    pub tree: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DemoGapReport {
    pub seed: u64,
    pub formula: String,
    pub teacher_r2: f64,
    pub symbolic_r2: f64,
    pub tree_r2: f64,
    pub tree_leaves: usize,
    pub points: Vec<DemoPoint>,
}

/// Fits a teacher and both students to noisy samples of [`demo_function`] on [-2, 2].
///
/// The teacher sees the train split of the samples; points are sorted by x and all R²
/// values are against the noise-free function over every point.
pub fn demo_gap(n: usize, seed: u64, cfg: &ExperimentConfig) -> Result<DemoGapReport> {
    if n < 10 {
        return Err(Error::Config(format!("demo-gap needs at least 10 points, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs_dist = Uniform::new_inclusive(-2.0, 2.0).expect("valid range");
    let noise = Normal::new(0.0, 0.1).expect("valid scale");
    let mut xs: Vec<f64> = (0..n).map(|_| xs_dist.sample(&mut rng)).collect();
    xs.sort_by(f64::total_cmp);
    let y_true: Vec<f64> = xs.iter().map(|&x| demo_function(x)).collect();
    let y_obs: Vec<f64> = y_true.iter().map(|y| y + noise.sample(&mut rng)).collect();
    let ds = Dataset::new("demo_gap", vec!["x".into()], Matrix::from_vec(n, 1, xs.clone()), y_obs.clone())?;

    let stage = train_teacher_stage(&ds, 0.0, seed, 0.0, cfg)?;
    let x_all = stage.scaler.transform(&ds.x);
    let teacher = stage.model.predict_batch(&x_all)?;
    let (gp, _, _) = distill_symbolic(&stage, cfg)?;
    let tree = fit_tree(&stage.distillation, &cfg.tree)?;
    let symbolic: Vec<f64> = x_all.iter_rows().map(|r| gp.best_tree.eval(r)).collect();
    let tree_pred = tree.predict(&x_all)?;

    let points = (0..n)
        .map(|i| DemoPoint {
            x: xs[i],
            y_true: y_true[i],
            y_observed: y_obs[i],
            teacher: teacher[i],
            symbolic: symbolic[i],
            tree: tree_pred[i],
        })
        .collect();
    Ok(DemoGapReport {
        seed,
        formula: gp.formula.clone(),
        teacher_r2: r2(&y_true, &teacher)?,
        symbolic_r2: r2(&y_true, &symbolic)?,
        tree_r2: r2(&y_true, &tree_pred)?,
        tree_leaves: tree.leaf_count(),
        points,
    })
}
