use chrono::NaiveDate;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the engine can report, grouped by the module that raises it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor: {op}: incompatible shapes {shapes}")]
    Dimension { op: &'static str, shapes: String },

    #[error("tensor: contract violated: {0}")]
    Contract(String),

    #[error("market_data: parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("market_data: data error at line {line}: {message}")]
    Data { line: usize, message: String },

    #[error("features: invalid input: {0}")]
    InvalidSeries(String),

    #[error("market_data: point-in-time violation: duplicate bar for asset {asset_id} on {date}")]
    PitViolation { asset_id: String, date: NaiveDate },

    #[error("market_data: universe error: {0}")]
    Universe(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("features: join error: {0}")]
    Join(String),

    #[error("features: missing feature: {0}")]
    MissingFeature(String),

    #[error("changepoint: kernel matrix is singular after jitter escalation")]
    SingularKernel,

    #[error("numeric error in {block}: non-finite values")]
    Numeric { block: String },

    #[error("metrics: {0} is undefined for this series")]
    UndefinedMetric(&'static str),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, shapes: &[&[usize]]) -> Self {
        let shapes = shapes
            .iter()
            .map(|s| format!("{s:?}"))
            .collect::<Vec<_>>()
            .join(" vs ");
        Error::Dimension { op, shapes }
    }

    /// True for errors caused by the input data rather than by configuration.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::Config(_) | Error::Contract(_))
    }
}
