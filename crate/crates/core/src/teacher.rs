//! One-hidden-layer ReLU network trained with Adam on
//! `mse + lambda * mean ||J||_F^2`, where `J` is the input Jacobian.
//!
//! Everything is analytic. The ReLU mask is held constant when
//! differentiating the Jacobian penalty, which is the exact derivative
//! everywhere except on the measure-zero set where a preactivation is 0.
//! `relu'(0)` is taken to be 0.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Scaler;
use crate::matrix::Matrix;
use crate::metrics::{mean, population_variance};
use crate::rng::{seeded, Stream};

#[derive(Debug, Error)]
pub enum TeacherError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid teacher config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("model file: {0}")]
    Serde(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub hidden_width: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda: f64,
    pub seed: u64,
    /// Train against a z-scored copy of the target and fold the affine map
    /// back into the output layer afterwards. The objective is unchanged up
    /// to a constant factor; only the optimizer's conditioning differs.
    pub standardize_target: bool,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            hidden_width: 100,
            learning_rate: 0.001,
            epochs: 100,
            batch_size: 128,
            lambda: 0.0,
            seed: 42,
            standardize_target: true,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<(), TeacherError> {
        let bad = |m: &str| Err(TeacherError::Config(m.into()));
        if self.hidden_width == 0 {
            return bad("hidden_width must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        check_lambda(self.lambda)
    }
}

fn check_lambda(lambda: f64) -> Result<(), TeacherError> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(TeacherError::Config(format!(
            "lambda must be a non-negative number, got {lambda}"
        )))
    }
}

/// Network parameters, stored contiguously as `[W1 | b1 | W2 | b2]`
/// with `W1` row-major `m x d`.
///
/// Gradients and Adam moments use the same layout, so they are represented
/// by this type as well.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherModel {
    d: usize,
    m: usize,
    params: Vec<f64>,
}

impl TeacherModel {
    pub fn zeros(d: usize, m: usize) -> Self {
        Self {
            d,
            m,
            params: vec![0.0; m * d + 2 * m + 1],
        }
    }

    pub fn from_parts(
        d: usize,
        m: usize,
        w1: &[f64],
        b1: &[f64],
        w2: &[f64],
        b2: f64,
    ) -> Result<Self, TeacherError> {
        if w1.len() != m * d || b1.len() != m || w2.len() != m {
            return Err(TeacherError::Shape(format!(
                "parameters do not describe a {d}-input, {m}-unit network"
            )));
        }
        let mut params = Vec::with_capacity(m * d + 2 * m + 1);
        params.extend_from_slice(w1);
        params.extend_from_slice(b1);
        params.extend_from_slice(w2);
        params.push(b2);
        if params.iter().any(|p| !p.is_finite()) {
            return Err(TeacherError::Shape("non-finite parameter".into()));
        }
        Ok(Self { d, m, params })
    }

    /// He-normal weights, zero biases.
    pub fn he_init(d: usize, m: usize, seed: u64) -> Self {
        let mut model = Self::zeros(d, m);
        let mut rng = seeded(seed, Stream::TeacherInit);
        let n1 = Normal::new(0.0, (2.0 / d as f64).sqrt()).expect("valid std");
        for w in model.w1_mut() {
            *w = n1.sample(&mut rng);
        }
        let n2 = Normal::new(0.0, (2.0 / m as f64).sqrt()).expect("valid std");
        for w in model.w2_mut() {
            *w = n2.sample(&mut rng);
        }
        model
    }

    pub fn input_dim(&self) -> usize {
        self.d
    }

    pub fn hidden_width(&self) -> usize {
        self.m
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn w1(&self) -> &[f64] {
        &self.params[..self.m * self.d]
    }

    pub fn w1_mut(&mut self) -> &mut [f64] {
        let k = self.m * self.d;
        &mut self.params[..k]
    }

    pub fn b1(&self) -> &[f64] {
        let k = self.m * self.d;
        &self.params[k..k + self.m]
    }

    pub fn b1_mut(&mut self) -> &mut [f64] {
        let k = self.m * self.d;
        &mut self.params[k..k + self.m]
    }

    pub fn w2(&self) -> &[f64] {
        let k = self.m * self.d + self.m;
        &self.params[k..k + self.m]
    }

    pub fn w2_mut(&mut self) -> &mut [f64] {
        let k = self.m * self.d + self.m;
        &mut self.params[k..k + self.m]
    }

    pub fn b2(&self) -> f64 {
        self.params[self.params.len() - 1]
    }

    pub fn set_b2(&mut self, v: f64) {
        let k = self.params.len() - 1;
        self.params[k] = v;
    }

    fn same_shape(&self, other: &TeacherModel) -> bool {
        self.d == other.d && self.m == other.m
    }

    fn check_input(&self, x: &[f64]) -> Result<(), TeacherError> {
        if x.len() == self.d {
            Ok(())
        } else {
            Err(TeacherError::Shape(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.d
            )))
        }
    }

    fn check_batch(&self, x: &Matrix, y: Option<&[f64]>) -> Result<(), TeacherError> {
        if x.cols() != self.d {
            return Err(TeacherError::Shape(format!(
                "batch has {} features, model expects {}",
                x.cols(),
                self.d
            )));
        }
        if x.rows() == 0 {
            return Err(TeacherError::Shape("empty batch".into()));
        }
        if let Some(y) = y {
            if y.len() != x.rows() {
                return Err(TeacherError::Shape(format!(
                    "{} targets for {} rows",
                    y.len(),
                    x.rows()
                )));
            }
        }
        Ok(())
    }

    #[inline]
    fn preactivation(&self, j: usize, x: &[f64]) -> f64 {
        let w = &self.w1()[j * self.d..(j + 1) * self.d];
        w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.b1()[j]
    }

    fn forward_unchecked(&self, x: &[f64]) -> f64 {
        let w2 = self.w2();
        let mut out = self.b2();
        for j in 0..self.m {
            let z = self.preactivation(j, x);
            if z > 0.0 {
                out += w2[j] * z;
            }
        }
        out
    }

    /// Input gradient `W2 diag(1[W1 x + b1 > 0]) W1`, written into `out`.
    fn jacobian_into(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let w2 = self.w2();
        let w1 = self.w1();
        for j in 0..self.m {
            if self.preactivation(j, x) > 0.0 {
                let row = &w1[j * self.d..(j + 1) * self.d];
                for (o, w) in out.iter_mut().zip(row) {
                    *o += w2[j] * w;
                }
            }
        }
    }

    /// `W2 . relu(W1 x + b1) + b2`.
    pub fn forward(&self, x: &[f64]) -> Result<f64, TeacherError> {
        self.check_input(x)?;
        Ok(self.forward_unchecked(x))
    }

    /// The `1 x d` input Jacobian.
    pub fn jacobian(&self, x: &[f64]) -> Result<Vec<f64>, TeacherError> {
        self.check_input(x)?;
        let mut out = vec![0.0; self.d];
        self.jacobian_into(x, &mut out);
        Ok(out)
    }

    pub fn predict_batch(&self, x: &Matrix) -> Result<Vec<f64>, TeacherError> {
        if x.cols() != self.d {
            return Err(TeacherError::Shape(format!(
                "batch has {} features, model expects {}",
                x.cols(),
                self.d
            )));
        }
        Ok(x.iter_rows().map(|r| self.forward_unchecked(r)).collect())
    }

    pub fn mse_loss(&self, x: &Matrix, y: &[f64]) -> Result<f64, TeacherError> {
        self.check_batch(x, Some(y))?;
        let s: f64 = x
            .iter_rows()
            .zip(y)
            .map(|(r, t)| {
                let e = t - self.forward_unchecked(r);
                e * e
            })
            .sum();
        Ok(s / x.rows() as f64)
    }

    /// Mean over rows of the squared Frobenius norm of the input Jacobian.
    pub fn jacobian_penalty(&self, x: &Matrix) -> Result<f64, TeacherError> {
        self.check_batch(x, None)?;
        let mut jac = vec![0.0; self.d];
        let mut s = 0.0;
        for r in x.iter_rows() {
            self.jacobian_into(r, &mut jac);
            s += jac.iter().map(|v| v * v).sum::<f64>();
        }
        Ok(s / x.rows() as f64)
    }

    pub fn total_loss(&self, x: &Matrix, y: &[f64], lambda: f64) -> Result<f64, TeacherError> {
        check_lambda(lambda)?;
        let mse = self.mse_loss(x, y)?;
        if lambda == 0.0 {
            return Ok(mse);
        }
        Ok(mse + lambda * self.jacobian_penalty(x)?)
    }

    /// Analytic gradient of [`TeacherModel::total_loss`] with respect to all parameters.
    pub fn grad_total_loss(
        &self,
        x: &Matrix,
        y: &[f64],
        lambda: f64,
    ) -> Result<TeacherModel, TeacherError> {
        check_lambda(lambda)?;
        self.check_batch(x, Some(y))?;
        let rows: Vec<usize> = (0..x.rows()).collect();
        let mut grad = TeacherModel::zeros(self.d, self.m);
        let mut scratch = Scratch::new(self.d, self.m);
        self.accumulate_batch(x, y, &rows, lambda, &mut grad.params, &mut scratch);
        Ok(grad)
    }

    /// Writes the gradient of the batch objective over `rows` into `grad`
    /// and returns the batch `(mse, penalty)`. The penalty is only computed
    /// when `lambda > 0` and is reported as 0 otherwise.
    fn accumulate_batch(
        &self,
        x: &Matrix,
        y: &[f64],
        rows: &[usize],
        lambda: f64,
        grad: &mut [f64],
        scratch: &mut Scratch,
    ) -> (f64, f64) {
        let (d, m) = (self.d, self.m);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let (g_w1, rest) = grad.split_at_mut(m * d);
        let (g_b1, rest) = rest.split_at_mut(m);
        let (g_w2, g_b2) = rest.split_at_mut(m);
        let w1 = self.w1();
        let b1 = self.b1();
        let w2 = self.w2();
        let b2 = self.b2();
        let n = rows.len() as f64;
        let penalize = lambda > 0.0;
        let k_pen = 2.0 * lambda / n;
        let mut sum_sq = 0.0;
        let mut sum_pen = 0.0;

        for &i in rows {
            let xi = x.row(i);
            let mut f = b2;
            for j in 0..m {
                let z = w1[j * d..(j + 1) * d]
                    .iter()
                    .zip(xi)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    + b1[j];
                scratch.z[j] = z;
                if z > 0.0 {
                    f += w2[j] * z;
                }
            }
            let r = f - y[i];
            sum_sq += r * r;
            let c = 2.0 * r / n;
            g_b2[0] += c;

            if penalize {
                scratch.jac.iter_mut().for_each(|v| *v = 0.0);
                for j in 0..m {
                    if scratch.z[j] > 0.0 {
                        let row = &w1[j * d..(j + 1) * d];
                        for (o, w) in scratch.jac.iter_mut().zip(row) {
                            *o += w2[j] * w;
                        }
                    }
                }
                sum_pen += scratch.jac.iter().map(|v| v * v).sum::<f64>();
            }

            for j in 0..m {
                let z = scratch.z[j];
                if z <= 0.0 {
                    continue;
                }
                g_w2[j] += c * z;
                let t = c * w2[j];
                g_b1[j] += t;
                let gw = &mut g_w1[j * d..(j + 1) * d];
                for (g, xv) in gw.iter_mut().zip(xi) {
                    *g += t * xv;
                }
                if penalize {
                    let row = &w1[j * d..(j + 1) * d];
                    let dot: f64 = row.iter().zip(&scratch.jac).map(|(a, b)| a * b).sum();
                    g_w2[j] += k_pen * dot;
                    let s = k_pen * w2[j];
                    for (g, jv) in gw.iter_mut().zip(&scratch.jac) {
                        *g += s * jv;
                    }
                }
            }
        }
        (sum_sq / n, sum_pen / n)
    }
}

struct Scratch {
    z: Vec<f64>,
    jac: Vec<f64>,
}

impl Scratch {
    fn new(d: usize, m: usize) -> Self {
        Self {
            z: vec![0.0; m],
            jac: vec![0.0; d],
        }
    }
}

pub fn forward(model: &TeacherModel, x: &[f64]) -> Result<f64, TeacherError> {
    model.forward(x)
}

pub fn jacobian(model: &TeacherModel, x: &[f64]) -> Result<Vec<f64>, TeacherError> {
    model.jacobian(x)
}

pub fn mse_loss(model: &TeacherModel, x: &Matrix, y: &[f64]) -> Result<f64, TeacherError> {
    model.mse_loss(x, y)
}

pub fn jacobian_penalty(model: &TeacherModel, x: &Matrix) -> Result<f64, TeacherError> {
    model.jacobian_penalty(x)
}

pub fn total_loss(
    model: &TeacherModel,
    x: &Matrix,
    y: &[f64],
    lambda: f64,
) -> Result<f64, TeacherError> {
    model.total_loss(x, y, lambda)
}

pub fn grad_total_loss(
    model: &TeacherModel,
    x: &Matrix,
    y: &[f64],
    lambda: f64,
) -> Result<TeacherModel, TeacherError> {
    model.grad_total_loss(x, y, lambda)
}

pub fn predict_batch(model: &TeacherModel, x: &Matrix) -> Result<Vec<f64>, TeacherError> {
    model.predict_batch(x)
}

/// Adam moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            t: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
        }
    }

    pub fn for_model(model: &TeacherModel) -> Self {
        Self::new(model.params.len())
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.first_moment.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

pub fn adam_step(
    model: &TeacherModel,
    grad: &TeacherModel,
    state: &AdamState,
    lr: f64,
) -> Result<(TeacherModel, AdamState), TeacherError> {
    if !model.same_shape(grad) || state.first_moment.len() != model.params.len() {
        return Err(TeacherError::Shape("adam state, model and gradient disagree".into()));
    }
    let mut model = model.clone();
    let mut state = state.clone();
    state.update(&mut model.params, &grad.params, lr);
    Ok((model, state))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub mse: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub final_train_mse: f64,
    pub wall_time_seconds: f64,
    /// Per-epoch size-weighted means of the mini-batch terms, in target units.
    pub loss_history: Vec<EpochLoss>,
}

/// Trains a fresh teacher on (already standardized) features `x` and raw targets `y`.
pub fn train(
    x: &Matrix,
    y: &[f64],
    cfg: &TeacherConfig,
) -> Result<(TeacherModel, TrainStats), TeacherError> {
    cfg.validate()?;
    if x.rows() == 0 || x.cols() == 0 || y.len() != x.rows() {
        return Err(TeacherError::Shape(format!(
            "{} x {} features with {} targets",
            x.rows(),
            x.cols(),
            y.len()
        )));
    }
    let start = Instant::now();
    let (d, m, n) = (x.cols(), cfg.hidden_width, x.rows());

    let (y_shift, y_scale) = if cfg.standardize_target {
        let s = population_variance(y).sqrt();
        (mean(y), if s > 1e-12 { s } else { 1.0 })
    } else {
        (0.0, 1.0)
    };
    let targets: Vec<f64> = y.iter().map(|v| (v - y_shift) / y_scale).collect();
    let unit2 = y_scale * y_scale;

    let mut model = TeacherModel::he_init(d, m, cfg.seed);
    let mut adam = AdamState::for_model(&model);
    let mut grad = vec![0.0; model.params.len()];
    let mut scratch = Scratch::new(d, m);
    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = seeded(cfg.seed, Stream::TeacherShuffle);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut mse_acc, mut pen_acc) = (0.0, 0.0);
        for (batch, rows) in order.chunks(cfg.batch_size).enumerate() {
            let (mse, pen) =
                model.accumulate_batch(x, &targets, rows, cfg.lambda, &mut grad, &mut scratch);
            if !(mse + cfg.lambda * pen).is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(TeacherError::NonFinite { epoch, batch });
            }
            adam.update(&mut model.params, &grad, cfg.learning_rate);
            let w = rows.len() as f64 / n as f64;
            mse_acc += w * mse;
            pen_acc += w * pen;
        }
        history.push(EpochLoss {
            mse: mse_acc * unit2,
            penalty: pen_acc * unit2,
        });
    }

    // Fold the target affine map into the output layer.
    for w in model.w2_mut() {
        *w *= y_scale;
    }
    let b2 = model.b2() * y_scale + y_shift;
    model.set_b2(b2);
    if model.params.iter().any(|p| !p.is_finite()) {
        return Err(TeacherError::NonFinite {
            epoch: cfg.epochs,
            batch: 0,
        });
    }

    let final_train_mse = model.mse_loss(x, y)?;
    let wall_time_seconds = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
    Ok((
        model,
        TrainStats {
            final_train_mse,
            wall_time_seconds,
            loss_history: history,
        },
    ))
}

/// On-disk teacher: network, the feature scaler it was trained behind, and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedTeacher {
    pub model: TeacherModel,
    pub scaler: Scaler,
    pub seed: u64,
    pub lambda: f64,
    /// Holdout fraction of the split the teacher was trained on.
    pub test_fraction: f64,
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Serialize, Deserialize)]
#[allow(non_snake_case)]
struct TeacherFile {
    d: usize,
    m: usize,
    W1: Vec<f64>,
    b1: Vec<f64>,
    W2: Vec<f64>,
    b2: f64,
    scaler_means: Vec<f64>,
    scaler_stds: Vec<f64>,
    seed: u64,
    lambda: f64,
    #[serde(default = "default_test_fraction")]
    test_fraction: f64,
}

impl SavedTeacher {
    pub fn to_json(&self) -> String {
        let f = TeacherFile {
            d: self.model.d,
            m: self.model.m,
            W1: self.model.w1().to_vec(),
            b1: self.model.b1().to_vec(),
            W2: self.model.w2().to_vec(),
            b2: self.model.b2(),
            scaler_means: self.scaler.means.clone(),
            scaler_stds: self.scaler.stds.clone(),
            seed: self.seed,
            lambda: self.lambda,
            test_fraction: self.test_fraction,
        };
        serde_json::to_string_pretty(&f).expect("finite model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TeacherError> {
        let f: TeacherFile =
            serde_json::from_str(text).map_err(|e| TeacherError::Serde(e.to_string()))?;
        let model = TeacherModel::from_parts(f.d, f.m, &f.W1, &f.b1, &f.W2, f.b2)?;
        if f.scaler_means.len() != f.d || f.scaler_stds.len() != f.d {
            return Err(TeacherError::Shape("scaler length differs from d".into()));
        }
        Ok(Self {
            model,
            scaler: Scaler {
                means: f.scaler_means,
                stds: f.scaler_stds,
            },
            seed: f.seed,
            lambda: f.lambda,
            test_fraction: f.test_fraction,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TeacherError> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TeacherError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
