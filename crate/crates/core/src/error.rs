use thiserror::Error;

use crate::data::DataError;
use crate::dtree::TreeError;
use crate::metrics::MetricError;
use crate::symreg::{GpError, ParseError};
use crate::teacher::TeacherError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Teacher(#[from] TeacherError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Formula(#[from] ParseError),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// Process exit code: 1 config, 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Context { source, .. } => source.exit_code(),
            Error::Config(_)
            | Error::Teacher(TeacherError::Config(_))
            | Error::Gp(GpError::Config(_))
            | Error::Tree(TreeError::Config(_)) => 1,
            Error::Teacher(TeacherError::NonFinite { .. }) | Error::Metric(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
