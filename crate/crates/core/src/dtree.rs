//! Best-first CART regression trees with a leaf budget.
//!
//! Growth repeatedly splits whichever frontier leaf offers the largest
//! reduction in squared error, scanning every feature and every midpoint
//! between consecutive distinct values. Ties go to the lower feature index,
//! then the lower threshold, then the older leaf.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::symreg::DistillationSet;

#[derive(Debug, Error, PartialEq)]
pub enum TreeError {
    #[error("invalid tree config: {0}")]
    Config(String),
    #[error("tree fitting needs at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("input has {got} features, tree expects {expected}")]
    Shape { expected: usize, got: usize },
    #[error("malformed tree json: {0}")]
    Json(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeConfig {
    pub max_leaves: usize,
    pub min_samples_leaf: usize,
    /// Growth is deterministic; the seed is carried for provenance only.
    pub seed: u64,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            max_leaves: 32,
            min_samples_leaf: 1,
            seed: 42,
        }
    }
}

impl TreeConfig {
    pub fn validate(&self) -> Result<(), TreeError> {
        if self.max_leaves < 2 {
            return Err(TreeError::Config(format!(
                "max_leaves must be >= 2, got {}",
                self.max_leaves
            )));
        }
        if self.min_samples_leaf == 0 {
            return Err(TreeError::Config("min_samples_leaf must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

/// Arena-allocated tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    nodes: Vec<TreeNode>,
    n_features: usize,
}

impl RegressionTree {
    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, TreeNode::Leaf { .. }))
            .count()
    }

    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                TreeNode::Leaf { value } => return value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>, TreeError> {
        if x.cols() != self.n_features {
            return Err(TreeError::Shape {
                expected: self.n_features,
                got: x.cols(),
            });
        }
        Ok(x.iter_rows().map(|r| self.predict_row(r)).collect())
    }

    /// Nested `{feature, threshold, left, right}` / `{value}` objects.
    pub fn to_json_value(&self) -> Value {
        fn walk(t: &RegressionTree, at: usize) -> Value {
            match t.nodes[at] {
                TreeNode::Leaf { value } => json!({ "value": value }),
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => json!({
                    "feature": feature,
                    "threshold": threshold,
                    "left": walk(t, left),
                    "right": walk(t, right),
                }),
            }
        }
        walk(self, 0)
    }

    pub fn from_json_value(v: &Value, n_features: usize) -> Result<Self, TreeError> {
        fn walk(v: &Value, nodes: &mut Vec<TreeNode>, d: usize) -> Result<usize, TreeError> {
            let err = |m: &str| TreeError::Json(m.into());
            let at = nodes.len();
            if let Some(value) = v.get("value") {
                let value = value.as_f64().ok_or_else(|| err("leaf value is not a number"))?;
                nodes.push(TreeNode::Leaf { value });
                return Ok(at);
            }
            let feature = v
                .get("feature")
                .and_then(Value::as_u64)
                .ok_or_else(|| err("split without feature"))? as usize;
            if feature >= d {
                return Err(err("feature index out of range"));
            }
            let threshold = v
                .get("threshold")
                .and_then(Value::as_f64)
                .ok_or_else(|| err("split without threshold"))?;
            nodes.push(TreeNode::Leaf { value: 0.0 });
            let left = walk(v.get("left").ok_or_else(|| err("split without left"))?, nodes, d)?;
            let right = walk(v.get("right").ok_or_else(|| err("split without right"))?, nodes, d)?;
            nodes[at] = TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            };
            Ok(at)
        }
        let mut nodes = Vec::new();
        walk(v, &mut nodes, n_features)?;
        Ok(Self { nodes, n_features })
    }
}

#[derive(Debug, Clone)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

struct Frontier {
    node: usize,
    rows: Vec<usize>,
    best: Option<Candidate>,
}

fn sse(y: &[f64], rows: &[usize]) -> f64 {
    let n = rows.len() as f64;
    let m = rows.iter().map(|&i| y[i]).sum::<f64>() / n;
    rows.iter().map(|&i| (y[i] - m) * (y[i] - m)).sum()
}

fn leaf_mean(y: &[f64], rows: &[usize]) -> f64 {
    rows.iter().map(|&i| y[i]).sum::<f64>() / rows.len() as f64
}

/// Best split of `rows`, or `None` when no admissible split reduces SSE by more than `min_gain`.
fn best_split(
    x: &Matrix,
    y: &[f64],
    rows: &[usize],
    min_leaf: usize,
    min_gain: f64,
) -> Option<Candidate> {
    let n = rows.len();
    if n < 2 * min_leaf {
        return None;
    }
    let center = leaf_mean(y, rows);
    let parent = sse(y, rows);
    let mut best: Option<Candidate> = None;
    let mut order = rows.to_vec();
    for f in 0..x.cols() {
        order.sort_by(|&a, &b| x.get(a, f).total_cmp(&x.get(b, f)).then(a.cmp(&b)));
        let total: f64 = order.iter().map(|&i| y[i] - center).sum();
        let total_sq: f64 = order.iter().map(|&i| (y[i] - center).powi(2)).sum();
        let (mut s, mut sq) = (0.0, 0.0);
        for k in 1..n {
            let v = y[order[k - 1]] - center;
            s += v;
            sq += v * v;
            let (lo, hi) = (x.get(order[k - 1], f), x.get(order[k], f));
            if lo >= hi || k < min_leaf || n - k < min_leaf {
                continue;
            }
            let (nl, nr) = (k as f64, (n - k) as f64);
            let left = sq - s * s / nl;
            let right = (total_sq - sq) - (total - s).powi(2) / nr;
            let gain = parent - left - right;
            let threshold = {
                let mid = 0.5 * (lo + hi);
                if mid < hi { mid } else { lo }
            };
            let beats = match &best {
                None => gain > min_gain,
                Some(b) => gain > b.gain + min_gain,
            };
            if beats {
                best = Some(Candidate {
                    gain,
                    feature: f,
                    threshold,
                });
            }
        }
    }
    best
}

/// Grows a tree on the teacher predictions of `ds`.
pub fn fit_tree(ds: &DistillationSet, cfg: &TreeConfig) -> Result<RegressionTree, TreeError> {
    fit_xy(ds.x(), ds.y_hat(), cfg)
}

pub fn fit_xy(x: &Matrix, y: &[f64], cfg: &TreeConfig) -> Result<RegressionTree, TreeError> {
    cfg.validate()?;
    if x.rows() < 2 {
        return Err(TreeError::TooFewSamples(x.rows()));
    }
    let all: Vec<usize> = (0..x.rows()).collect();
    // tolerance for "strictly reduces SSE" and for tie detection; the second
    // term absorbs rounding noise on (near-)constant targets
    let scale = y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min_gain = 1e-12 * sse(y, &all) + all.len() as f64 * (1e-12 * scale).powi(2);
    let mut nodes = vec![TreeNode::Leaf {
        value: leaf_mean(y, &all),
    }];
    let best = best_split(x, y, &all, cfg.min_samples_leaf, min_gain);
    let mut frontier = vec![Frontier {
        node: 0,
        rows: all,
        best,
    }];
    let mut leaves = 1;

    while leaves < cfg.max_leaves {
        let mut pick: Option<usize> = None;
        for (k, leaf) in frontier.iter().enumerate() {
            let Some(c) = &leaf.best else { continue };
            let take = match pick.and_then(|p| frontier[p].best.as_ref()) {
                None => true,
                Some(b) => c.gain > b.gain + min_gain,
            };
            if take {
                pick = Some(k);
            }
        }
        let Some(k) = pick else { break };
        let leaf = frontier.remove(k);
        let c = leaf.best.expect("picked leaf has a split");
        let (l_rows, r_rows): (Vec<usize>, Vec<usize>) = leaf
            .rows
            .iter()
            .partition(|&&i| x.get(i, c.feature) <= c.threshold);
        let (l, r) = (nodes.len(), nodes.len() + 1);
        nodes.push(TreeNode::Leaf {
            value: leaf_mean(y, &l_rows),
        });
        nodes.push(TreeNode::Leaf {
            value: leaf_mean(y, &r_rows),
        });
        nodes[leaf.node] = TreeNode::Split {
            feature: c.feature,
            threshold: c.threshold,
            left: l,
            right: r,
        };
        leaves += 1;
        for (node, rows) in [(l, l_rows), (r, r_rows)] {
            let best = best_split(x, y, &rows, cfg.min_samples_leaf, min_gain);
            frontier.push(Frontier { node, rows, best });
        }
    }
    Ok(RegressionTree {
        nodes,
        n_features: x.cols(),
    })
}

pub fn predict_tree(t: &RegressionTree, x: &Matrix) -> Result<Vec<f64>, TreeError> {
    t.predict(x)
}

pub fn count_leaves(t: &RegressionTree) -> usize {
    t.leaf_count()
}
