//! Independent oracles used by the integration and acceptance tests.
#![allow(dead_code)]

use distillforge::teacher::TeacherModel;
use distillforge::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central differences of `f` at `p`, one coordinate at a time.
pub fn central_diff(p: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut q = p.to_vec();
    (0..p.len())
        .map(|k| {
            q[k] = p[k] + h;
            let up = f(&q);
            q[k] = p[k] - h;
            let down = f(&q);
            q[k] = p[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// |a - b| relative to the larger magnitude, with an absolute floor for values near zero.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Rebuilds a model of the same shape from a flat parameter vector in [W1 | b1 | W2 | b2] order.
pub fn with_params(d: usize, m: usize, p: &[f64]) -> TeacherModel {
    let (w1, rest) = p.split_at(m * d);
    let (b1, rest) = rest.split_at(m);
    let (w2, b2) = rest.split_at(m);
    TeacherModel::from_parts(d, m, w1, b1, w2, b2[0]).unwrap()
}

pub fn preactivations(model: &TeacherModel, x: &[f64]) -> Vec<f64> {
    let d = model.input_dim();
    let (w1, b1) = (model.w1(), model.b1());
    (0..model.hidden_width())
        .map(|j| {
            w1[j * d..(j + 1) * d]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                + b1[j]
        })
        .collect()
}

pub fn min_abs_preactivation(model: &TeacherModel, x: &Matrix) -> f64 {
    x.iter_rows()
        .flat_map(|r| preactivations(model, r))
        .fold(f64::INFINITY, |a, z| a.min(z.abs()))
}

/// A random teacher and batch whose preactivations all stay at least `margin` away from zero.
pub fn random_instance(
    rng: &mut ChaCha8Rng,
    d: usize,
    m: usize,
    n: usize,
    margin: f64,
) -> (TeacherModel, Matrix, Vec<f64>) {
    loop {
        let p: Vec<f64> = (0..m * d + 2 * m + 1)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let model = with_params(d, m, &p);
        let x = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect());
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        if min_abs_preactivation(&model, &x) > margin {
            return (model, x, y);
        }
    }
}

/// Textbook Adam, written without reference to the library implementation.
pub struct ReferenceAdam {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    m: f64,
    v: f64,
    t: i32,
}

impl ReferenceAdam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
            m: 0.0,
            v: 0.0,
            t: 0,
        }
    }

    pub fn step(&mut self, theta: f64, g: f64) -> f64 {
        self.t += 1;
        self.m = self.b1 * self.m + (1.0 - self.b1) * g;
        self.v = self.b2 * self.v + (1.0 - self.b2) * g * g;
        let m_hat = self.m / (1.0 - self.b1.powi(self.t));
        let v_hat = self.v / (1.0 - self.b2.powi(self.t));
        theta - self.lr * m_hat / (v_hat.sqrt() + self.eps)
    }
}

fn sse_of(y: &[f64]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let m = y.iter().sum::<f64>() / y.len() as f64;
    y.iter().map(|v| (v - m) * (v - m)).sum()
}

/// Every (feature, midpoint) split of the given rows, as (left_rows, right_rows).
fn all_splits(x: &Matrix, rows: &[usize]) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut out = Vec::new();
    for f in 0..x.cols() {
        let mut vals: Vec<f64> = rows.iter().map(|&i| x.get(i, f)).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        for w in vals.windows(2) {
            let t = 0.5 * (w[0] + w[1]);
            let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| x.get(i, f) <= t);
            out.push((l, r));
        }
    }
    out
}

/// Total SSE reached by best-first growth to `leaves` leaves, found by enumerating
/// every split at every step. Ties are broken arbitrarily, so only the SSE is meaningful.
pub fn best_first_sse(x: &Matrix, y: &[f64], leaves: usize) -> f64 {
    let ys = |rows: &[usize]| rows.iter().map(|&i| y[i]).collect::<Vec<_>>();
    let mut frontier: Vec<Vec<usize>> = vec![(0..x.rows()).collect()];
    while frontier.len() < leaves {
        let mut best: Option<(f64, usize, Vec<usize>, Vec<usize>)> = None;
        for (k, rows) in frontier.iter().enumerate() {
            let parent = sse_of(&ys(rows));
            for (l, r) in all_splits(x, rows) {
                let gain = parent - sse_of(&ys(&l)) - sse_of(&ys(&r));
                if best.as_ref().is_none_or(|b| gain > b.0) {
                    best = Some((gain, k, l, r));
                }
            }
        }
        match best {
            Some((gain, k, l, r)) if gain > 1e-12 => {
                frontier.remove(k);
                frontier.push(l);
                frontier.push(r);
            }
            _ => break,
        }
    }
    frontier.iter().map(|rows| sse_of(&ys(rows))).sum()
}
