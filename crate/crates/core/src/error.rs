use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = QamoError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum QamoError {
    #[error("vector has zero norm")]
    ZeroNorm,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("MOS {0} outside [1, 5]")]
    MosOutOfRange(f64),
    #[error("invalid quality policy: {0}")]
    InvalidPolicy(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: non-finite feature value")]
    NonFiniteFeature { line: usize },
    #[error("unknown centroid init scheme `{0}`")]
    InvalidScheme(String),
    #[error("orthogonal init needs Q <= D (Q={levels}, D={dim})")]
    TooManyCentroids { levels: usize, dim: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("bona fide sample {index} has no quality level")]
    MissingQuality { index: usize },
    #[error("quality level {level} out of range for {levels} centroids")]
    QualityOutOfRange { level: usize, levels: usize },
    #[error("EER needs both classes (bona fide: {bonafide}, spoof: {spoof})")]
    EmptyClass { bonafide: usize, spoof: usize },
    #[error("training diverged at epoch {epoch}, step {step}: loss = {value}")]
    DivergenceDetected {
        epoch: usize,
        step: usize,
        value: f64,
    },
    #[error("record `{id}`: {source}")]
    Record {
        id: String,
        #[source]
        source: Box<QamoError>,
    },
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl QamoError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        QamoError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn for_record(self, id: &str) -> Self {
        QamoError::Record {
            id: id.to_owned(),
            source: Box::new(self),
        }
    }
}
