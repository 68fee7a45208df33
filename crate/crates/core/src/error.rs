use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// A tensor did not have the shape a layer expects.
    #[error("dimension error at layer {layer} ({kind}): {detail}")]
    Dimension {
        layer: usize,
        kind: &'static str,
        detail: String,
    },
    /// Two buffers that must agree in length do not.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A computation produced NaN/Inf or an invalid probability.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// A model or experiment was configured inconsistently.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// An input violated an operation's precondition.
    #[error("precondition violated: {0}")]
    Precondition(String),
}

pub type Result<T> = core::result::Result<T, Error>;
