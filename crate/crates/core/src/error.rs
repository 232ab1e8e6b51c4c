use thiserror::Error;

use crate::data::Basis;

/// Errors produced by fitting, testing and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("outcome {y} is outside the domain of the {basis} basis")]
    Domain { y: f64, basis: Basis },

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("negative weight {weight} at respondent {index}")]
    NegativeWeight { index: usize, weight: f64 },

    #[error("Newton solver stopped after {iterations} iterations with gradient norm {grad_norm:e}")]
    NoConvergence {
        iterations: usize,
        grad_norm: f64,
        last: Vec<f64>,
    },

    #[error("response model for group {group} is not estimable: {detail}")]
    Separation { group: usize, detail: String },

    #[error("eta{group} = {eta} leaves no probability for {missing} nonrespondents")]
    DegenerateEta {
        group: usize,
        eta: f64,
        missing: usize,
    },

    #[error("eta{group} = {value} lies outside (0, 1)")]
    EtaOutOfRange { group: usize, value: f64 },

    #[error("fits were computed on different datasets or model specifications")]
    MismatchedFits,

    #[error("degenerate sample: {0}")]
    Degenerate(String),

    #[error("only {succeeded} of {requested} bootstrap refits succeeded")]
    BootstrapFailed { succeeded: usize, requested: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
