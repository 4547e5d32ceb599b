use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shape, geometry, range).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("empty image: no valid pixels")]
    EmptyImage,

    #[error("degenerate labels: both classes are required")]
    DegenerateLabels,

    #[error("no regions: ground truth contains no defect pixels")]
    NoRegions,

    #[error("FPR undefined: ground truth contains no anomaly-free pixels")]
    FprUndefined,

    #[error("no nominal data: no normal chunk available for training")]
    NoNominalData,

    #[error("modality unavailable: {0}")]
    ModalityUnavailable(String),

    #[error("protocol violation: {0}")]
    ProtocolViolation(String),

    /// Malformed tensor container; `offset` is the byte offset where decoding failed.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: u64, msg: String },

    /// Malformed manifest or config; `path` names the offending field.
    #[error("schema error at {path}: {msg}")]
    Schema { path: String, msg: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// Stable machine-readable identifier used in error records and the C ABI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract_violation",
            Error::Diverged { .. } => "diverged",
            Error::EmptyImage => "empty_image",
            Error::DegenerateLabels => "degenerate_labels",
            Error::NoRegions => "no_regions",
            Error::FprUndefined => "fpr_undefined",
            Error::NoNominalData => "no_nominal_data",
            Error::ModalityUnavailable(_) => "modality_unavailable",
            Error::ProtocolViolation(_) => "protocol_violation",
            Error::Parse { .. } => "parse_error",
            Error::Schema { .. } => "schema_error",
            Error::Config(_) => "invalid_config",
            Error::Io(_) => "io_error",
        }
    }
}
