use thiserror::Error;

pub type Result<T> = std::result::Result<T, GradError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GradError {
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("zero-sized trailing dimension in shape {shape:?}")]
    ZeroDimension { shape: Vec<usize> },
    #[error("non-finite input value at flat index {index}")]
    NonFiniteInput { index: usize },
    #[error("cannot stack an empty list")]
    EmptyStack,
    #[error("stack shape mismatch: expected {expected:?}, found {found:?}")]
    StackShape {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("node {node} ({op}): shape mismatch: {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("node {node} ({op}) produced a non-finite value")]
    NonFinite { node: usize, op: &'static str },
    #[error("input `{0}` is not bound")]
    UnboundInput(String),
    #[error("unknown input `{0}`")]
    UnknownInput(String),
    #[error("parameter {index} has shape {found:?}, graph expects {expected:?}")]
    ParamShape {
        index: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter store holds {found} tensors, graph expects {expected}")]
    ParamCount { expected: usize, found: usize },
    #[error("output of shape {shape:?} is not scalar; a seed gradient is required")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("seed shape {seed:?} does not match output shape {output:?}")]
    SeedShape {
        seed: Vec<usize>,
        output: Vec<usize>,
    },
    #[error("node {node} was not evaluated for this output")]
    NotEvaluated { node: usize },
}
