use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("behind camera: depth {0} is not positive")]
    BehindCamera(f64),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("degenerate bounding box: {0}")]
    DegenerateBBox(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate: {0}")]
    Degenerate(String),
    #[error("singular normal equations (damping {damping:e})")]
    Singular { damping: f64 },
    #[error("no consensus: best model has {inliers} inliers")]
    NoConsensus { inliers: usize },
    #[error("scorer failed: {0}")]
    Scorer(String),
    #[error("all refinements failed")]
    AllRefinementsFailed,
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
