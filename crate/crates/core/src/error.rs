use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum CdError {
    #[error("decode error for {path}: {reason}")]
    Decode { path: String, reason: String },

    #[error("encode error for {path}: {reason}")]
    Encode { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("invalid raster: {0}")]
    InvalidRaster(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("singular homography (|det| = {det:e})")]
    SingularHomography { det: f64 },

    #[error("point maps to infinity (denominator {denom:e})")]
    PointAtInfinity { denom: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid target: {0}")]
    InvalidTarget(String),

    #[error("missing gradient for parameter '{0}'")]
    MissingGradient(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint role mismatch: expected {expected}, found {found}")]
    RoleMismatch { expected: String, found: String },

    #[error("degenerate estimation: {0}")]
    Degenerate(String),

    #[error("alignment failed: {0}")]
    AlignmentFailed(String),

    #[error("extent mismatch: {0}")]
    ExtentMismatch(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Crate-wide result alias.
pub type CdResult<T> = Result<T, CdError>;
