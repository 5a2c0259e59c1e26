use thiserror::Error;

use crate::network::NeuronId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("path enumeration too large: product of layer widths {product} exceeds cap {cap}")]
    PathExplosion { product: u128, cap: u128 },

    #[error("malformed path: {0}")]
    MalformedPath(String),

    #[error("parameters lie in the degenerate set S (hidden neurons {witnesses:?})")]
    Degenerate { witnesses: Vec<NeuronId> },

    #[error("invalid rescaling vectors: {0}")]
    Rescaling(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("finite-difference step too large: activation pattern flips when probing coordinate {coordinate}")]
    StepTooLarge { coordinate: usize },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("no witness found: {0}")]
    NoWitnessFound(String),

    #[error("model file: {0}")]
    Format(String),
}
