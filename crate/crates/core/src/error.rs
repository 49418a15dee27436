#[derive(Debug, thiserror::Error)]
pub enum LgssError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("certificate violation: {0}")]
    CertificateViolation(String),
    #[error("singular model unsupported: {0}")]
    SingularModelUnsupported(String),
    #[error("problem too large: {0}")]
    TooLarge(String),
    #[error("model is not certifiably stable: {0}")]
    NotCertifiable(String),
    #[error("bound is unbounded: {0}")]
    Unbounded(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error(transparent)]
    Sdp(#[from] lgss_sdp::SdpError),
}

pub type Result<T> = std::result::Result<T, LgssError>;
