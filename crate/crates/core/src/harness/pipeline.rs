use std::time::Instant;

use crate::data::{inject_label_noise, split, Dataset, Scaler, SplitIndices};
use crate::dtree::{fit_tree, RegressionTree};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::matrix::Matrix;
use crate::metrics::{r2, ScoreRow};
use crate::symreg::{evolve, DistillationSet, GPResult};
use crate::teacher::{train, TeacherModel, TrainStats};

/// A trained teacher and everything derived from it on one split.
#[derive(Debug, Clone)]
pub struct TeacherStage {
    pub dataset: String,
    pub lambda: f64,
    pub seed: u64,
    pub sigma: f64,
    pub split: SplitIndices,
    pub scaler: Scaler,
    pub model: TeacherModel,
    pub stats: TrainStats,
    /// Standardized test features and their ground truth.
    pub x_test: Matrix,
    pub y_test: Vec<f64>,
    pub teacher_test_pred: Vec<f64>,
    pub teacher_r2_train: f64,
    pub teacher_r2_test: f64,
    /// D′: standardized train features labelled by the teacher.
    pub distillation: DistillationSet,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub row: ScoreRow,
    pub teacher: TeacherStage,
    pub student: GPResult,
    /// Wall time of the whole run, teacher and student.
    pub total_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TreeOutcome {
    pub teacher: TeacherStage,
    pub tree: RegressionTree,
    pub student_r2_test: f64,
    pub fidelity_r2: f64,
}

/// Split, scale, train the teacher at `lambda` and label the train split.
///
/// When `sigma > 0`, Gaussian noise is added to the train labels only.
pub fn train_teacher_stage(
    ds: &Dataset,
    lambda: f64,
    seed: u64,
    sigma: f64,
    cfg: &ExperimentConfig,
) -> Result<TeacherStage> {
    let sp = split(ds, cfg.test_fraction, seed)?;
    let mut train_ds = ds.subset(&sp.train);
    if sigma > 0.0 {
        train_ds = inject_label_noise(&train_ds, sigma, seed)?;
    }
    let test_ds = ds.subset(&sp.test);

    // Scaler sees train rows only.
    let all_train: Vec<usize> = (0..train_ds.n_samples()).collect();
    let scaler = Scaler::fit(&train_ds.x, &all_train)?;
    let x_train = scaler.transform(&train_ds.x);
    let x_test = scaler.transform(&test_ds.x);

    let mut tcfg = cfg.teacher.clone();
    tcfg.lambda = lambda;
    tcfg.seed = seed;
    let (model, stats) = train(&x_train, &train_ds.y, &tcfg)?;

    let train_pred = model.predict_batch(&x_train)?;
    let teacher_test_pred = model.predict_batch(&x_test)?;
    let teacher_r2_train = r2(&train_ds.y, &train_pred)?;
    let teacher_r2_test = r2(&test_ds.y, &teacher_test_pred)?;
    let distillation = DistillationSet::new(x_train, train_pred)?;

    Ok(TeacherStage {
        dataset: ds.name.clone(),
        lambda,
        seed,
        sigma,
        split: sp,
        scaler,
        model,
        stats,
        x_test,
        y_test: test_ds.y,
        teacher_test_pred,
        teacher_r2_train,
        teacher_r2_test,
        distillation,
    })
}

/// Evolves a symbolic student on the stage's D′ and scores it on the test split.
pub fn distill_symbolic(stage: &TeacherStage, cfg: &ExperimentConfig) -> Result<(GPResult, f64, f64)> {
    let mut gcfg = cfg.gp.clone();
    gcfg.seed = stage.seed;
    let res = evolve(&stage.distillation, &gcfg)?;
    let pred: Vec<f64> = stage
        .x_test
        .iter_rows()
        .map(|row| res.best_tree.eval(row))
        .collect();
    let student = r2(&stage.y_test, &pred)?;
    let fidelity = r2(&stage.teacher_test_pred, &pred)?;
    Ok((res, student, fidelity))
}

pub fn distill_tree(stage: TeacherStage, cfg: &ExperimentConfig) -> Result<TreeOutcome> {
    let tree = fit_tree(&stage.distillation, &cfg.tree)?;
    let pred = tree.predict(&stage.x_test)?;
    let student_r2_test = r2(&stage.y_test, &pred)?;
    let fidelity_r2 = r2(&stage.teacher_test_pred, &pred)?;
    Ok(TreeOutcome {
        teacher: stage,
        tree,
        student_r2_test,
        fidelity_r2,
    })
}

fn context(ds: &Dataset, lambda: f64, seed: u64, sigma: f64) -> String {
    if sigma > 0.0 {
        format!("{} (lambda={lambda}, seed={seed}, sigma={sigma})", ds.name)
    } else {
        format!("{} (lambda={lambda}, seed={seed})", ds.name)
    }
}

/// Teacher at `lambda`, symbolic student on its train-split predictions, scores on the test split.
pub fn run_pipeline(ds: &Dataset, lambda: f64, seed: u64, cfg: &ExperimentConfig) -> Result<PipelineOutcome> {
    run_pipeline_noisy(ds, lambda, seed, 0.0, cfg)
}

pub fn run_pipeline_noisy(
    ds: &Dataset,
    lambda: f64,
    seed: u64,
    sigma: f64,
    cfg: &ExperimentConfig,
) -> Result<PipelineOutcome> {
    let start = Instant::now();
    let run = || -> Result<PipelineOutcome> {
        let stage = train_teacher_stage(ds, lambda, seed, sigma, cfg)?;
        let (student, student_r2_test, fidelity_r2) = distill_symbolic(&stage, cfg)?;
        let row = ScoreRow {
            dataset: ds.name.clone(),
            lambda,
            seed,
            teacher_r2_train: stage.teacher_r2_train,
            teacher_r2_test: stage.teacher_r2_test,
            student_r2_test,
            fidelity_r2,
            formula: student.formula.clone(),
            train_seconds: stage.stats.wall_time_seconds,
        };
        Ok(PipelineOutcome {
            row,
            teacher: stage,
            student,
            total_seconds: start.elapsed().as_secs_f64(),
        })
    };
    run().map_err(|e: Error| e.context(context(ds, lambda, seed, sigma)))
}

pub fn run_tree_pipeline(
    ds: &Dataset,
    lambda: f64,
    seed: u64,
    cfg: &ExperimentConfig,
) -> Result<TreeOutcome> {
    train_teacher_stage(ds, lambda, seed, 0.0, cfg)
        .and_then(|stage| distill_tree(stage, cfg))
        .map_err(|e| e.context(context(ds, lambda, seed, 0.0)))
}
