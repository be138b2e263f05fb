use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("partition error: {0}")]
    Partition(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter error: {0}")]
    Param(String),
    #[error("numerics error: {0}")]
    Numerics(String),
    /// The averaged adjoint iteration failed after exhausting its restarts.
    #[error("adjoint iteration diverged after {restarts} restarts (last residual {residual:e}, alpha {alpha:e})")]
    AdjointDivergence {
        restarts: usize,
        residual: f64,
        alpha: f64,
    },
    /// Adjoint divergence raised while differentiating a specific network layer.
    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("format error at byte offset {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }

    pub(crate) fn numerics(msg: impl Into<String>) -> Self {
        Error::Numerics(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    /// True when this error (possibly wrapped with a layer index) is an adjoint divergence.
    pub fn is_adjoint_divergence(&self) -> bool {
        match self {
            Error::AdjointDivergence { .. } => true,
            Error::Layer { source, .. } => source.is_adjoint_divergence(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
