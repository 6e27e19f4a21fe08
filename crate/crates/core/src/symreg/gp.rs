//! Koza-style genetic programming with gplearn-compatible operators.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::expr::{BinaryOp, BufferPool, ExprTree, Node};
use crate::matrix::Matrix;
use crate::metrics::{mse, r2};
use crate::rng::{seeded, Stream};

/// Per-node replacement probability used by point mutation.
pub const P_POINT_REPLACE: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum GpError {
    #[error("invalid GP config: {0}")]
    Config(String),
    #[error("invalid distillation set: {0}")]
    Data(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoppingMetric {
    /// Stop once `1 - R²` of the best program on the distillation set is at or below the threshold.
    R2,
    /// Stop once the best program's raw MSE is at or below the threshold.
    RawFitness,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMethod {
    Full,
    Grow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GPConfig {
    pub population_size: usize,
    pub generations: usize,
    pub tournament_size: usize,
    pub p_crossover: f64,
    pub p_subtree_mutation: f64,
    pub p_hoist_mutation: f64,
    pub p_point_mutation: f64,
    pub parsimony_coefficient: f64,
    /// Inclusive range of initial tree depths (a lone leaf has depth 1).
    pub init_depth: (usize, usize),
    pub max_depth: usize,
    pub constant_range: (f64, f64),
    /// Non-positive values disable early stopping.
    pub stopping_threshold: f64,
    pub stopping_metric: StoppingMetric,
    pub seed: u64,
}

impl Default for GPConfig {
    fn default() -> Self {
        Self {
            population_size: 500,
            generations: 30,
            tournament_size: 20,
            p_crossover: 0.9,
            p_subtree_mutation: 0.01,
            p_hoist_mutation: 0.01,
            p_point_mutation: 0.01,
            parsimony_coefficient: 0.001,
            init_depth: (2, 6),
            max_depth: 17,
            constant_range: (-1.0, 1.0),
            stopping_threshold: 0.01,
            stopping_metric: StoppingMetric::R2,
            seed: 42,
        }
    }
}

impl GPConfig {
    pub fn validate(&self) -> Result<(), GpError> {
        let bad = |m: String| Err(GpError::Config(m));
        if self.population_size < 2 {
            return bad(format!("population_size must be >= 2, got {}", self.population_size));
        }
        if self.generations == 0 {
            return bad("generations must be >= 1".into());
        }
        if self.tournament_size == 0 {
            return bad("tournament_size must be >= 1".into());
        }
        let ps = [
            self.p_crossover,
            self.p_subtree_mutation,
            self.p_hoist_mutation,
            self.p_point_mutation,
        ];
        if ps.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
            return bad("operator probabilities must be non-negative".into());
        }
        if ps.iter().sum::<f64>() > 1.0 + 1e-12 {
            return bad("operator probabilities sum to more than 1".into());
        }
        let (lo, hi) = self.init_depth;
        if lo < 1 || lo > hi {
            return bad(format!("init_depth ({lo}, {hi}) is not a valid range"));
        }
        if self.max_depth < hi {
            return bad(format!("max_depth {} is below the initial depth {hi}", self.max_depth));
        }
        let (a, b) = self.constant_range;
        if !(a.is_finite() && b.is_finite() && a <= b) {
            return bad("constant_range must be a finite, ordered pair".into());
        }
        if !(self.parsimony_coefficient >= 0.0 && self.parsimony_coefficient.is_finite()) {
            return bad("parsimony_coefficient must be non-negative".into());
        }
        Ok(())
    }
}

/// Inputs paired with teacher predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillationSet {
    x: Matrix,
    y_hat: Vec<f64>,
    columns: Vec<Vec<f64>>,
}

impl DistillationSet {
    pub fn new(x: Matrix, y_hat: Vec<f64>) -> Result<Self, GpError> {
        if x.rows() == 0 || x.cols() == 0 {
            return Err(GpError::Data("need at least one row and one feature".into()));
        }
        if y_hat.len() != x.rows() {
            return Err(GpError::Data(format!(
                "{} targets for {} rows",
                y_hat.len(),
                x.rows()
            )));
        }
        if x.as_slice().iter().chain(&y_hat).any(|v| !v.is_finite()) {
            return Err(GpError::Data("non-finite entry".into()));
        }
        let columns = (0..x.cols()).map(|j| x.column(j)).collect();
        Ok(Self { x, y_hat, columns })
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y_hat(&self) -> &[f64] {
        &self.y_hat
    }

    pub fn n_samples(&self) -> usize {
        self.x.rows()
    }

    pub fn n_features(&self) -> usize {
        self.x.cols()
    }

    pub fn predict(&self, t: &ExprTree, pool: &mut BufferPool) -> Vec<f64> {
        t.eval_columns(&self.columns, self.n_samples(), pool)
    }

    /// Mean squared error of `t` against the teacher predictions.
    pub fn raw_fitness(&self, t: &ExprTree, pool: &mut BufferPool) -> f64 {
        let pred = self.predict(t, pool);
        let m = mse(&self.y_hat, &pred);
        pool.give(pred);
        if m.is_finite() {
            m
        } else {
            f64::MAX
        }
    }
}

/// Raw MSE plus `parsimony * node_count`.
pub fn fitness(t: &ExprTree, ds: &DistillationSet, parsimony: f64) -> f64 {
    let mut pool = BufferPool::default();
    ds.raw_fitness(t, &mut pool) + parsimony * t.node_count() as f64
}

/// R² of `t` against the teacher predictions; a constant target counts as
/// fully explained only when the fit is exact.
pub fn r2_on(ds: &DistillationSet, t: &ExprTree) -> f64 {
    let mut pool = BufferPool::default();
    let pred = ds.predict(t, &mut pool);
    r2(&ds.y_hat, &pred).unwrap_or_else(|_| if mse(&ds.y_hat, &pred) == 0.0 { 1.0 } else { 0.0 })
}

fn random_terminal(n_features: usize, const_range: (f64, f64), rng: &mut ChaCha8Rng) -> Node {
    let k = rng.random_range(0..=n_features);
    if k == n_features {
        let (a, b) = const_range;
        Node::Const(if a == b { a } else { rng.random_range(a..=b) })
    } else {
        Node::Var(k)
    }
}

fn random_op(rng: &mut ChaCha8Rng) -> Node {
    Node::Op(BinaryOp::ALL[rng.random_range(0..BinaryOp::ALL.len())])
}

/// Random tree of at most `depth` levels. `Full` puts every leaf at exactly `depth`;
/// `Grow` always places an operator at the root when `depth > 1`.
pub fn random_tree_with_depth(
    n_features: usize,
    depth: usize,
    method: InitMethod,
    const_range: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> ExprTree {
    assert!(depth >= 1 && n_features >= 1);
    let n_ops = BinaryOp::ALL.len();
    let mut nodes = Vec::new();
    // pending child slots, each tagged with the level it will occupy
    let mut pending = vec![1usize];
    while let Some(level) = pending.pop() {
        let use_op = if level >= depth {
            false
        } else if level == 1 {
            true
        } else {
            match method {
                InitMethod::Full => true,
                InitMethod::Grow => rng.random_range(0..n_ops + n_features + 1) < n_ops,
            }
        };
        if use_op {
            nodes.push(random_op(rng));
            pending.push(level + 1);
            pending.push(level + 1);
        } else {
            nodes.push(random_terminal(n_features, const_range, rng));
        }
    }
    ExprTree::from_prefix_unchecked(nodes)
}

/// Random tree with depth drawn uniformly from `cfg.init_depth`.
pub fn random_tree(
    cfg: &GPConfig,
    n_features: usize,
    rng: &mut ChaCha8Rng,
    method: InitMethod,
) -> ExprTree {
    let (lo, hi) = cfg.init_depth;
    let depth = rng.random_range(lo..=hi);
    random_tree_with_depth(n_features, depth, method, cfg.constant_range, rng)
}

/// Picks a subtree, favouring operator roots 9:1 over terminals.
fn pick_subtree(t: &ExprTree, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let weights: Vec<f64> = t
        .nodes()
        .iter()
        .map(|n| if n.is_terminal() { 0.1 } else { 0.9 })
        .collect();
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut start = weights.len() - 1;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            start = i;
            break;
        }
    }
    (start, t.subtree_end(start))
}

fn splice(parent: &ExprTree, span: (usize, usize), insert: &[Node]) -> ExprTree {
    let p = parent.nodes();
    let mut nodes = Vec::with_capacity(p.len() - (span.1 - span.0) + insert.len());
    nodes.extend_from_slice(&p[..span.0]);
    nodes.extend_from_slice(insert);
    nodes.extend_from_slice(&p[span.1..]);
    ExprTree::from_prefix_unchecked(nodes)
}

/// Replaces a random subtree of `parent` with a random subtree of `donor`.
pub fn crossover(parent: &ExprTree, donor: &ExprTree, rng: &mut ChaCha8Rng) -> ExprTree {
    let span = pick_subtree(parent, rng);
    let (ds, de) = pick_subtree(donor, rng);
    splice(parent, span, &donor.nodes()[ds..de])
}

/// Crossover with a freshly generated donor.
pub fn subtree_mutation(
    parent: &ExprTree,
    cfg: &GPConfig,
    n_features: usize,
    rng: &mut ChaCha8Rng,
) -> ExprTree {
    let method = if rng.random::<bool>() { InitMethod::Full } else { InitMethod::Grow };
    let donor = random_tree(cfg, n_features, rng, method);
    crossover(parent, &donor, rng)
}

/// Replaces a random subtree with one of its own subtrees.
pub fn hoist_mutation(parent: &ExprTree, rng: &mut ChaCha8Rng) -> ExprTree {
    let (s, e) = pick_subtree(parent, rng);
    let sub = ExprTree::from_prefix_unchecked(parent.nodes()[s..e].to_vec());
    let (hs, he) = pick_subtree(&sub, rng);
    splice(parent, (s, e), &sub.nodes()[hs..he])
}

/// Resamples each node independently with probability [`P_POINT_REPLACE`],
/// keeping arity.
pub fn point_mutation(
    parent: &ExprTree,
    n_features: usize,
    const_range: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> ExprTree {
    let nodes = parent
        .nodes()
        .iter()
        .map(|n| {
            if rng.random::<f64>() >= P_POINT_REPLACE {
                *n
            } else if n.is_terminal() {
                random_terminal(n_features, const_range, rng)
            } else {
                random_op(rng)
            }
        })
        .collect();
    ExprTree::from_prefix_unchecked(nodes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GPResult {
    pub best_tree: ExprTree,
    /// Selection fitness of the elite after each generation.
    pub best_fitness_history: Vec<f64>,
    pub generations_run: usize,
    pub formula: String,
    pub raw_mse: f64,
    pub r2_on_distillation_set: f64,
}

#[derive(Serialize, Deserialize)]
struct GPResultFile {
    formula: String,
    raw_mse: f64,
    r2_on_distillation_set: f64,
    generations_run: usize,
    node_count: usize,
    history: Vec<f64>,
}

impl GPResult {
    pub fn node_count(&self) -> usize {
        self.best_tree.node_count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&GPResultFile {
            formula: self.formula.clone(),
            raw_mse: self.raw_mse,
            r2_on_distillation_set: self.r2_on_distillation_set,
            generations_run: self.generations_run,
            node_count: self.node_count(),
            history: self.best_fitness_history.clone(),
        })
        .expect("finite result serializes")
    }

    /// Reads a result back; the tree is rebuilt from the formula string.
    pub fn from_json(text: &str) -> Result<Self, String> {
        let f: GPResultFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let best_tree = ExprTree::parse(&f.formula).map_err(|e| e.to_string())?;
        Ok(Self {
            best_tree,
            best_fitness_history: f.history,
            generations_run: f.generations_run,
            formula: f.formula,
            raw_mse: f.raw_mse,
            r2_on_distillation_set: f.r2_on_distillation_set,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct Scored {
    raw: f64,
    selection: f64,
    size: usize,
}

/// `a` beats `b`: lower selection fitness, then smaller tree, then earlier index.
fn better(a: (usize, &Scored), b: (usize, &Scored)) -> bool {
    (a.1.selection, a.1.size, a.0) < (b.1.selection, b.1.size, b.0)
}

/// Generation-by-generation evolution state.
pub struct Evolution<'a> {
    ds: &'a DistillationSet,
    cfg: GPConfig,
    rng: ChaCha8Rng,
    population: Vec<ExprTree>,
    scores: Vec<Scored>,
    history: Vec<f64>,
    generation: usize,
    stopped: bool,
}

impl<'a> Evolution<'a> {
    /// Builds and scores the ramped half-and-half initial population (generation 1).
    pub fn new(ds: &'a DistillationSet, cfg: &GPConfig) -> Result<Self, GpError> {
        cfg.validate()?;
        if ds.n_samples() < 2 {
            return Err(GpError::Data("evolution needs at least two samples".into()));
        }
        let mut rng = seeded(cfg.seed, Stream::Evolution);
        let d = ds.n_features();
        let population = (0..cfg.population_size)
            .map(|_| {
                let method = if rng.random::<bool>() { InitMethod::Full } else { InitMethod::Grow };
                random_tree(cfg, d, &mut rng, method)
            })
            .collect();
        let mut evo = Self {
            ds,
            cfg: cfg.clone(),
            rng,
            population,
            scores: Vec::new(),
            history: Vec::new(),
            generation: 0,
            stopped: false,
        };
        evo.score();
        Ok(evo)
    }

    fn score(&mut self) {
        let ds = self.ds;
        let parsimony = self.cfg.parsimony_coefficient;
        self.scores = self
            .population
            .par_iter()
            .map_init(BufferPool::default, |pool, t| {
                let raw = ds.raw_fitness(t, pool);
                Scored {
                    raw,
                    selection: raw + parsimony * t.node_count() as f64,
                    size: t.node_count(),
                }
            })
            .collect();
        self.generation += 1;
        let e = self.elite_index();
        self.history.push(self.scores[e].selection);
        self.stopped = self.should_stop(e);
    }

    fn should_stop(&self, elite: usize) -> bool {
        let th = self.cfg.stopping_threshold;
        if th <= 0.0 {
            return false;
        }
        match self.cfg.stopping_metric {
            StoppingMetric::R2 => 1.0 - r2_on(self.ds, &self.population[elite]) <= th,
            StoppingMetric::RawFitness => self.scores[elite].raw <= th,
        }
    }

    pub fn elite_index(&self) -> usize {
        let mut best = 0;
        for i in 1..self.scores.len() {
            if better((i, &self.scores[i]), (best, &self.scores[best])) {
                best = i;
            }
        }
        best
    }

    fn tournament(&mut self) -> usize {
        let n = self.population.len();
        let mut best = self.rng.random_range(0..n);
        for _ in 1..self.cfg.tournament_size {
            let c = self.rng.random_range(0..n);
            if better((c, &self.scores[c]), (best, &self.scores[best])) {
                best = c;
            }
        }
        best
    }

    fn offspring(&mut self) -> ExprTree {
        let d = self.ds.n_features();
        let parent_idx = self.tournament();
        let parent = self.population[parent_idx].clone();
        let cfg = &self.cfg;
        let u: f64 = self.rng.random();
        let c1 = cfg.p_crossover;
        let c2 = c1 + cfg.p_subtree_mutation;
        let c3 = c2 + cfg.p_hoist_mutation;
        let c4 = c3 + cfg.p_point_mutation;
        let (max_depth, const_range) = (cfg.max_depth, cfg.constant_range);
        let child = if u < c1 {
            let donor_idx = self.tournament();
            let donor = self.population[donor_idx].clone();
            crossover(&parent, &donor, &mut self.rng)
        } else if u < c2 {
            let cfg = self.cfg.clone();
            subtree_mutation(&parent, &cfg, d, &mut self.rng)
        } else if u < c3 {
            hoist_mutation(&parent, &mut self.rng)
        } else if u < c4 {
            point_mutation(&parent, d, const_range, &mut self.rng)
        } else {
            return parent;
        };
        if child.depth() > max_depth {
            parent
        } else {
            child
        }
    }

    /// Breeds and scores the next generation. Returns `false` once finished.
    pub fn step(&mut self) -> bool {
        if self.is_finished() {
            return false;
        }
        let elite = self.population[self.elite_index()].clone();
        let mut next = Vec::with_capacity(self.population.len());
        next.push(elite);
        while next.len() < self.population.len() {
            let child = self.offspring();
            next.push(child);
        }
        self.population = next;
        self.score();
        true
    }

    pub fn is_finished(&self) -> bool {
        self.stopped || self.generation >= self.cfg.generations
    }

    pub fn generation(&self) -> usize {
        self.generation
    }

    pub fn population(&self) -> &[ExprTree] {
        &self.population
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }

    pub fn into_result(self) -> GPResult {
        let e = self.elite_index();
        let best_tree = self.population[e].clone();
        GPResult {
            formula: best_tree.format_prefix(),
            raw_mse: self.scores[e].raw,
            r2_on_distillation_set: r2_on(self.ds, &best_tree),
            best_tree,
            best_fitness_history: self.history,
            generations_run: self.generation,
        }
    }
}

/// Runs the full search.
pub fn evolve(ds: &DistillationSet, cfg: &GPConfig) -> Result<GPResult, GpError> {
    let mut evo = Evolution::new(ds, cfg)?;
    while evo.step() {}
    Ok(evo.into_result())
}
