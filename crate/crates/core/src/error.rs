use thiserror::Error;

/// Errors raised by model construction, estimation and prediction.
#[derive(Debug, Error)]
pub enum FrkError {
    #[error("dimension mismatch: expected {expected} coordinates, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("length mismatch in {what}: {left} vs {right}")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("manifold mismatch: {0}")]
    ManifoldMismatch(String),

    #[error("empty footprint: {0}")]
    EmptyFootprint(String),

    #[error("duplicate point at index {0}")]
    DuplicatePoint(usize),

    #[error("matrix {matrix} is not positive definite")]
    NotPositiveDefinite { matrix: &'static str },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("problem too large: {0}")]
    TooLarge(String),

    #[error("variant mismatch: model is {model}, requested {requested}")]
    VariantMismatch {
        model: &'static str,
        requested: &'static str,
    },

    #[error("model has not been fitted")]
    NotFitted,

    #[error(
        "log-likelihood decreased at EM iteration {iteration}: {previous} -> {current}"
    )]
    LikelihoodDecrease {
        iteration: usize,
        previous: f64,
        current: f64,
    },

    #[error("serialisation: {0}")]
    Serde(#[from] serde_json::Error),
}

impl FrkError {
    /// True when the error stems from numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            FrkError::NotPositiveDefinite { .. }
                | FrkError::Singular(_)
                | FrkError::LikelihoodDecrease { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, FrkError>;
