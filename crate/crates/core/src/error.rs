use thiserror::Error;

#[derive(Debug, Error)]
pub enum HegpError {
    #[error("linear algebra failure: {0}")]
    LinAlg(String),
    #[error("parameter out of domain: {0}")]
    Domain(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged at iteration {iteration}: {message}")]
    Diverged { iteration: usize, message: String },
    #[error("at iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<HegpError>,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HegpError {
    pub fn at(self, iteration: usize) -> HegpError {
        match self {
            e @ HegpError::AtIteration { .. } | e @ HegpError::Diverged { .. } => e,
            e => HegpError::AtIteration { iteration, source: Box::new(e) },
        }
    }

    /// Innermost error with any iteration wrapper removed.
    pub fn root(&self) -> &HegpError {
        match self {
            HegpError::AtIteration { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T> = std::result::Result<T, HegpError>;
