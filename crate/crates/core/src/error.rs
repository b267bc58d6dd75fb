use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure classes used to pick process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Numerical,
    Config,
    Data,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Numerical => 1,
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("column `{column}` is not standardized: {reason}")]
    NotStandardized { column: String, reason: String },

    #[error("column `{0}` is collinear with the active set")]
    Collinear(String),

    #[error("missing columns: {}", .0.join(", "))]
    MissingColumns(Vec<String>),

    #[error("unexpected columns: {}", .0.join(", "))]
    UnexpectedColumns(Vec<String>),

    #[error("transform mismatch: model fitted with `{expected}`, matrix uses `{found}`")]
    TransformMismatch { expected: String, found: String },

    #[error("undefined R²: observed response is constant")]
    UndefinedRSquared,

    #[error("length mismatch: expected {expected}, got {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("infeasible split plan: {0}")]
    InfeasibleSplits(String),

    #[error("site error: {0}")]
    Site(String),

    #[error("missing covariate `{0}`")]
    MissingCovariate(String),

    #[error("raster error: {0}")]
    Raster(String),

    #[error("ill-conditioned system: {0}")]
    IllConditioned(String),

    #[error("empty design: {0}")]
    EmptyDesign(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error("split {split}: {source}")]
    Split {
        split: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Collinear(_)
            | Error::IllConditioned(_)
            | Error::UndefinedRSquared
            | Error::CheckFailed(_) => {
                ErrorClass::Numerical
            }
            Error::Config(_) => ErrorClass::Config,
            Error::Split { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }

}
