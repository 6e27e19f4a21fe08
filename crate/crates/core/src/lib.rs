//! Teacher regularization and symbolic distillation.
//!
//! A one-hidden-layer ReLU network (the teacher) is trained with an optional
//! penalty on the squared Frobenius norm of its input Jacobian. Its
//! predictions are then distilled into a symbolic formula found by genetic
//! programming, or into a best-first regression tree. The [`harness`] module
//! runs the λ sweeps, tree comparison, noise ablation and SNR analysis and
//! writes CSV/JSON reports.

pub mod data;
pub mod dtree;
pub mod error;
pub mod harness;
pub mod matrix;
pub mod metrics;
mod rng;
pub mod symreg;
pub mod teacher;

pub use data::{Dataset, Scaler, SnrReport, SplitIndices};
pub use dtree::{RegressionTree, TreeConfig};
pub use error::Error;
pub use matrix::Matrix;
pub use metrics::ScoreRow;
pub use symreg::{DistillationSet, ExprTree, GPConfig, GPResult};
pub use teacher::{AdamState, TeacherConfig, TeacherModel, TrainStats};
