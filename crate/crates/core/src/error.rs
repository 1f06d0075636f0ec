use std::path::PathBuf;

/// Every failure the library can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("softmax row {row} has no unmasked entry")]
    DegenerateRow { row: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("numerical instability in mLSTM at step {step}")]
    Numerical { step: usize },

    #[error("empty sequence")]
    EmptySequence,

    #[error("mask selection error: {0}")]
    Selection(String),

    #[error("no scored units in loss")]
    EmptyLoss,

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("step {step} outside schedule range 0..={total}")]
    ScheduleRange { step: usize, total: usize },

    #[error("rejected optimizer step: non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("checkpoint does not match configuration (expected fingerprint {expected}, found {found})")]
    Fingerprint { expected: String, found: String },

    #[error("invalid configuration:\n{}", .0.iter().map(|v| format!("  - {v}")).collect::<Vec<_>>().join("\n"))]
    Config(Vec<String>),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("failed to ingest {path}: {reason}")]
    Ingest { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// Short stable name for the error class, used for CLI diagnostics.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Geometry(_) => "geometry",
            Error::DegenerateRow { .. } => "degenerate-row",
            Error::NonFinite(_) | Error::Numerical { .. } | Error::NonFiniteGradient(_) => {
                "numerical"
            }
            Error::EmptySequence | Error::Selection(_) | Error::EmptyLoss => "selection",
            Error::Label { .. } => "label",
            Error::ScheduleRange { .. } => "schedule",
            Error::Decode(_) | Error::Ingest { .. } => "ingestion",
            Error::Fingerprint { .. } => "checkpoint",
            Error::Config(_) => "config",
            Error::Dataset(_) => "dataset",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
