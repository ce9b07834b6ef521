use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{primitive}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        primitive: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),

    #[error("{primitive}: expected {expected} input(s), got {got}")]
    Arity {
        primitive: &'static str,
        expected: &'static str,
        got: usize,
    },

    #[error("{primitive}: missing attribute `{attr}`")]
    MissingAttr {
        primitive: &'static str,
        attr: &'static str,
    },

    #[error("shape {shape:?} does not hold {len} elements")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("{0}: produced a non-finite value")]
    NonFinite(&'static str),

    #[error("backward root must hold exactly one element, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("parameter `{0}` registered twice")]
    DuplicateParam(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;
