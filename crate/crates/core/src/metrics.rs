//! Scores shared by every experiment.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} targets vs {1} predictions")]
    LengthMismatch(usize, usize),
    #[error("R² needs at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("R² is undefined for a constant target")]
    ConstantTarget,
    #[error("relative improvement is undefined for a non-positive baseline ({0})")]
    NonPositiveBaseline(f64),
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Divide-by-N variance.
pub fn population_variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
}

/// Median of the finite entries; NaN when there are none.
pub fn median(v: &[f64]) -> f64 {
    let mut s: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    if s.is_empty() {
        return f64::NAN;
    }
    s.sort_by(f64::total_cmp);
    let k = s.len();
    if k % 2 == 1 {
        s[k / 2]
    } else {
        0.5 * (s[k / 2 - 1] + s[k / 2])
    }
}

pub fn mse(y_true: &[f64], y_pred: &[f64]) -> f64 {
    y_true
        .iter()
        .zip(y_pred)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / y_true.len() as f64
}

/// Coefficient of determination, `1 - SS_res / SS_tot`.
pub fn r2(y_true: &[f64], y_pred: &[f64]) -> Result<f64, MetricError> {
    if y_true.len() != y_pred.len() {
        return Err(MetricError::LengthMismatch(y_true.len(), y_pred.len()));
    }
    if y_true.len() < 2 {
        return Err(MetricError::TooFewSamples(y_true.len()));
    }
    let m = mean(y_true);
    let ss_tot: f64 = y_true.iter().map(|y| (y - m) * (y - m)).sum();
    if ss_tot <= 0.0 {
        return Err(MetricError::ConstantTarget);
    }
    let ss_res: f64 = y_true
        .iter()
        .zip(y_pred)
        .map(|(y, p)| (y - p) * (y - p))
        .sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Percent change from `base` to `new`. Callers round only for display.
pub fn relative_improvement(base: f64, new: f64) -> Result<f64, MetricError> {
    if !(base > 0.0) {
        return Err(MetricError::NonPositiveBaseline(base));
    }
    Ok(100.0 * (new - base) / base)
}

/// One (dataset, λ, seed) result of the distillation pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub dataset: String,
    pub lambda: f64,
    pub seed: u64,
    pub teacher_r2_train: f64,
    pub teacher_r2_test: f64,
    pub student_r2_test: f64,
    /// Student R² against the teacher's predictions on the test split.
    pub fidelity_r2: f64,
    pub formula: String,
    pub train_seconds: f64,
}
