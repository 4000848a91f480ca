use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("degenerate intensity distribution: {0}")]
    DegenerateIntensity(String),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("label schema violation: {0}")]
    Schema(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("optimization diverged: {0}")]
    Divergence(String),
    #[error("volumes do not overlap under the initial transform")]
    NoOverlap,
    #[error("surface distance undefined for class {class_id}: empty mask")]
    UndefinedDistance { class_id: u8 },
    #[error("fold plan error: {0}")]
    Plan(String),
    #[error("train/test leakage: {0}")]
    Leakage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by bad inputs, manifests or parameters rather than by
    /// numerics or the environment.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidGeometry(_)
                | Error::UnsupportedFormat(_)
                | Error::CorruptFile(_)
                | Error::Schema(_)
                | Error::Parameter(_)
                | Error::Input(_)
                | Error::Plan(_)
                | Error::Leakage(_)
                | Error::Json(_)
        )
    }

    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Divergence(_)
                | Error::DegenerateIntensity(_)
                | Error::NoOverlap
                | Error::UndefinedDistance { .. }
        )
    }
}
