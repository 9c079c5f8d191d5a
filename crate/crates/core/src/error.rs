//! Error types shared across the crate.

/// Crate-wide error type.
///
/// `Config` covers malformed inputs (dimension mismatches, invalid weights,
/// missing gains); `Numerical` covers solver breakdowns (non-convergence,
/// loss of definiteness). The distinction maps onto the CLI exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration: {0}")]
    Config(String),

    #[error("numerical: {0}")]
    Numerical(String),

    /// The inner PG loop blew past the divergence guard.
    #[error(
        "inner divergence{} at iteration {iteration}: |K| = {gain_norm:.3e} (eta = {eta:.3e}, r = {radius:.3e})",
        stage.map(|h| format!(" in stage {h}")).unwrap_or_default()
    )]
    InnerDivergence {
        stage: Option<usize>,
        iteration: u64,
        eta: f64,
        radius: f64,
        gain_norm: f64,
    },

    /// A cost evaluation returned a non-finite value.
    #[error("estimation failure: {0}")]
    EstimationFailure(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Attach the outer-loop stage index to an inner-loop divergence.
    pub fn with_stage(self, h: usize) -> Self {
        match self {
            Error::InnerDivergence {
                iteration,
                eta,
                radius,
                gain_norm,
                ..
            } => Error::InnerDivergence {
                stage: Some(h),
                iteration,
                eta,
                radius,
                gain_norm,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
