use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(
        "sinkhorn did not converge after {iterations} sweeps (marginal error {marginal_error:.3e})"
    )]
    SinkhornNotConverged {
        iterations: usize,
        marginal_error: f64,
    },

    #[error("flow step {step}: {source}")]
    FlowStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("flow diverged at step {step}: energy {energy:.6e} vs initial {initial:.6e} (step size too large?)")]
    FlowDiverged {
        step: usize,
        energy: f64,
        initial: f64,
    },

    #[error("batch element {index}: {source}")]
    Batch {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("conjugate gradient did not converge in {iterations} iterations (relative residual {residual:.3e})")]
    CgNotConverged { iterations: usize, residual: f64 },

    #[error("not a fixed point: gradient sup-norm {grad_norm:.3e} exceeds {tol:.3e}")]
    NotAFixedPoint { grad_norm: f64, tol: f64 },

    #[error("gradient is zero; condition number undefined")]
    ZeroGradient,

    #[error("spectral estimate did not converge: {0}")]
    EstimationFailed(String),

    #[error("unrolling needs {needed} bytes, budget is {budget}")]
    MemoryBudget { needed: usize, budget: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("class {class} has {count} members, fewer than {k} folds")]
    ClassTooRare {
        class: usize,
        count: usize,
        k: usize,
    },

    #[error("graph {graph}: {source}")]
    Graph {
        graph: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{skipped} of {total} graphs failed in training, above the allowed rate")]
    TooManySkips { skipped: usize, total: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
