use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("expected scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tensors belong to different tapes")]
    TapeMismatch,
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("ambiguous label extraction: classes {0} and {1} tie at the minimum row sum")]
    AmbiguousLabel(usize, usize),
    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),
    #[error("attack diverged at iteration {0}")]
    Diverged(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("bad CIFAR-10 file: {0}")]
    BadCifar(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
