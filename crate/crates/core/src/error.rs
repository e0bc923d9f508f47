use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("unknown method {0:?}")]
    UnknownMethod(String),
    #[error("unknown parameter {param:?} for method {method:?}")]
    UnknownParameter { method: String, param: String },
    #[error("micro-step index {lambda} outside 1..={m}")]
    LambdaOutOfRange { lambda: usize, m: usize },
    #[error("multirate ratio M = {0} outside 1..=10000")]
    InvalidRatio(usize),
    #[error("partition {0} is not implicit")]
    NotImplicitPartition(&'static str),
    #[error("stage dependency graph has a cycle; method is coupled")]
    CoupledMethod,
    #[error("resolvent I - AZ is singular")]
    SingularResolvent,
    #[error("Newton iteration diverged after {iterations} iterations")]
    NewtonDivergence { iterations: usize },
    #[error("non-finite state")]
    NonFiniteState,
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("step size {0:e} underflowed")]
    StepSizeUnderflow(f64),
    #[error("no reference solution available")]
    NoReference,
    #[error("bad coefficient expression: {0}")]
    Coefficient(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;
