use alloc::boxed::Box;
use alloc::string::String;

use crate::estimator::FitResult;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("covariance matrix of group {group} is not positive definite")]
    NotPositiveDefinite { group: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("fixed-effect design is rank deficient")]
    RankDeficient,

    #[error("design is not balanced: {0}")]
    NotBalanced(String),

    #[error("solver did not converge after {} iterations", .0.iterations)]
    DidNotConverge(Box<FitResult>),

    #[error("sandwich matrix Psi_n is singular")]
    SingularPsi,

    #[error("true covariance Sigma0 is singular")]
    SingularSigma0,

    #[error("estimated covariance of replication {replication} is singular")]
    SingularEstimate { replication: usize },
}

pub type Result<T> = core::result::Result<T, Error>;
