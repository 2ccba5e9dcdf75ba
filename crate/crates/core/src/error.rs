use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter component {index} = {value} outside [{lower}, {upper}]")]
    ParamOutOfRange {
        index: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("invalid parameter space: {0}")]
    InvalidParamSpace(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("operator `{0}` has no differentiable parameterization")]
    NotDifferentiable(String),
    #[error("parameter Jacobian is singular (Gram determinant {0:e})")]
    SingularJacobian(f64),
    #[error("sample is not in the image of the operator (residual {0:e})")]
    NotInImage(f64),
    #[error("operator `{0}` has no tractable inverse")]
    NoInverse(String),
    #[error("composition needs at least one operator")]
    EmptyComposition,
    #[error("invalid composite order: {0}")]
    InvalidOrder(String),
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("clean sample {index} has oracle label {oracle} but was given label {given}")]
    LabelMismatch {
        index: usize,
        oracle: usize,
        given: usize,
    },
    #[error("rejection sampling exhausted {attempts} attempts for sample {index}")]
    AcceptanceExhausted { index: usize, attempts: usize },
    #[error("augmented pairs have ragged groups (sizes {first} and {other})")]
    RaggedGroups { first: usize, other: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("degenerate sandwich bounds: alpha* = {0:e}")]
    DegenerateBounds(f64),
    #[error("non-finite gradient component at index {0}")]
    NonFiniteGradient(usize),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("class {0} would retain zero samples")]
    EmptyClass(usize),
    #[error("bad IDX magic number {found:#010x} (expected {expected:#010x})")]
    BadMagic { expected: u32, found: u32 },
    #[error("IDX count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("IDX file truncated: need {needed} bytes, have {have}")]
    TruncatedFile { needed: usize, have: usize },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
