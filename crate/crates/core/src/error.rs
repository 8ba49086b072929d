//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by the numerical and pipeline operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("SVD failed to converge on a {rows}x{cols} matrix")]
    SvdFailed { rows: usize, cols: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Training produced a non-finite loss or gradient. `last_good` is the
    /// allocation after the last finite step.
    #[error("training diverged in epoch {epoch}: {detail}")]
    Diverged {
        epoch: usize,
        detail: String,
        last_good: Box<crate::rank::RankAllocation>,
    },

    #[error("layer `{layer}`: {source}")]
    Layer {
        layer: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Container(#[from] crate::io::ContainerError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn in_layer(self, layer: &str) -> Self {
        Error::Layer {
            layer: layer.to_string(),
            source: Box::new(self),
        }
    }

    /// True for failures of the numerics (non-finite values, SVD convergence,
    /// divergence) as opposed to bad input or bad files.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFinite(_) | Error::SvdFailed { .. } | Error::Numerical(_) | Error::Diverged { .. } => true,
            Error::Layer { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
