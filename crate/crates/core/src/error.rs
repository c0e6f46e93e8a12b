use thiserror::Error;

use crate::forge::SimulatedAnomaly;
use crate::record::Technique;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv failure: {0}")]
    Csv(#[from] csv::Error),

    #[error("json failure: {0}")]
    Json(#[from] serde_json::Error),

    /// Header or configuration does not have the expected shape.
    #[error("schema failure: {0}")]
    Schema(String),

    #[error("insufficient data: need at least {needed} records, have {available}")]
    InsufficientData { needed: usize, available: usize },

    #[error("insufficient neighbors: requested {requested}, database holds {available}")]
    InsufficientNeighbors { requested: usize, available: usize },

    #[error("records share no comparable feature")]
    IncomparablePair,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("technique {found} is not supported here (expected {expected})")]
    UnsupportedTechnique { found: Technique, expected: String },

    #[error("mutation leaves the record unchanged: {0}")]
    DegenerateSwap(String),

    #[error("invalid mutation: {0}")]
    InvalidMutation(String),

    #[error("anomaly generation exhausted its attempt budget with {} of {requested} produced", partial.len())]
    GenerationExhausted {
        partial: Vec<SimulatedAnomaly>,
        requested: usize,
    },

    #[error("invalid training set: {0}")]
    InvalidTrainingSet(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("raters cover different record sets: {0}")]
    MismatchedRecords(String),
}
