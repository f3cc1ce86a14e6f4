use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("point {column} is behind the camera (depth {depth})")]
    BehindCamera { column: usize, depth: f64 },

    #[error("{pose} pose places a model vertex behind the camera (depth {depth})")]
    PoseBehindCamera { pose: &'static str, depth: f64 },

    #[error("too few confident keypoints: {found} above floor {floor}, need at least {needed}")]
    TooFewKeypoints { found: usize, needed: usize, floor: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("solver diverged: {message}")]
    SolverDiverged {
        message: String,
        last_valid: Box<crate::solver::PoseSnapshot>,
    },

    #[error("insufficient overlap: {found} correspondences, need at least {needed}")]
    InsufficientOverlap { found: usize, needed: usize },

    #[error("empty crop: no points inside the keypoint volume")]
    EmptyCrop,

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }
}
