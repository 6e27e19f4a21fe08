//! Symbolic-regression student: expression trees over `{add, sub, mul, div}`
//! searched by genetic programming.

mod expr;
mod gp;

pub use expr::{
    depth, eval_tree, format_prefix, node_count, BinaryOp, BufferPool, ExprTree, Node,
    ParseError, OVERFLOW_GUARD, PROTECTED_DIV_THRESHOLD,
};
pub use gp::{
    crossover, evolve, fitness, hoist_mutation, point_mutation, r2_on, random_tree,
    random_tree_with_depth, subtree_mutation, DistillationSet, Evolution, GPConfig, GPResult,
    GpError, InitMethod, StoppingMetric, P_POINT_REPLACE,
};
