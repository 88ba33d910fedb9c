use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown format `{0}`")]
    UnknownFormat(String),

    #[error("unsupported posit configuration ({n},{es})")]
    UnsupportedPosit { n: u32, es: u32 },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("format mismatch: expected {expected}, found {found}")]
    FormatMismatch { expected: String, found: String },

    #[error("accumulation limit reached: quire sized for {k_max} products")]
    AccumulationLimit { k_max: usize },

    #[error("quire overflow beyond {width} bits")]
    QuireOverflow { width: u32 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing gradient for layer `{0}`")]
    MissingGradient(String),

    #[error("infeasible budget {0} bits/param (minimum is 4)")]
    InfeasibleBudget(f64),

    #[error("incomplete precision map: no entry for layer `{0}`")]
    IncompleteMap(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("corrupt container: {0}")]
    Corrupt(String),

    #[error("csv: {0}")]
    Csv(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Numeric contract violations (as opposed to bad input data).
    pub fn is_numeric_contract(&self) -> bool {
        matches!(
            self,
            Error::QuireOverflow { .. } | Error::AccumulationLimit { .. } | Error::Diverged { .. }
        )
    }
}
