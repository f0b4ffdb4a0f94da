use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate layer `{layer}`: {detail}")]
    Degenerate { layer: String, detail: String },

    #[error("invalid parameter: {0}")]
    Param(String),

    #[error("oracle failure at coordinate {coordinate}: non-finite function value")]
    OracleFailure { coordinate: usize },

    #[error("training diverged at iteration {iteration}: {detail}")]
    Divergence { iteration: usize, detail: String },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn degenerate(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Degenerate { layer: layer.into(), detail: detail.into() }
    }
}
