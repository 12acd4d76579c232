use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("degenerate box: {0}")]
    DegenerateBox(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("{path}:{line}: parse error: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dimension error for {key}: {message}")]
    Dimension { key: String, message: String },

    #[error("rle length error: counts sum to {got}, expected {expected}")]
    RleLength { got: u64, expected: u64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("frame ordering error: frame {got} presented after frame {last}")]
    FrameOrder { last: u32, got: u32 },

    #[error("missing anchor: {0}")]
    MissingAnchor(String),

    #[error("empty selection: {0}")]
    EmptySelection(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty video: {0}")]
    EmptyVideo(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Divergence { epoch: usize, step: usize, loss: f64 },

    #[error("coverage error: missing {0:?}")]
    Coverage(Vec<String>),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("request timed out after {attempts} attempt(s): {message}")]
    Timeout { attempts: usize, message: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("segmentation service returned status {status}: {body}")]
    Service { status: u16, body: String },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable snake_case name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidBox(_) => "invalid_box",
            Error::DegenerateBox(_) => "degenerate_box",
            Error::Alignment(_) => "alignment",
            Error::Parse { .. } => "parse",
            Error::Dimension { .. } => "dimension",
            Error::RleLength { .. } => "rle_length",
            Error::Shape(_) => "shape",
            Error::Numeric(_) => "numeric",
            Error::FrameOrder { .. } => "frame_order",
            Error::MissingAnchor(_) => "missing_anchor",
            Error::EmptySelection(_) => "empty_selection",
            Error::EmptyBatch => "empty_batch",
            Error::EmptyVideo(_) => "empty_video",
            Error::Config(_) => "config",
            Error::Divergence { .. } => "divergence",
            Error::Coverage(_) => "coverage",
            Error::Validation(_) => "validation",
            Error::Timeout { .. } => "timeout",
            Error::Protocol(_) => "protocol",
            Error::Service { .. } => "service",
            Error::Transport(_) => "transport",
            Error::MissingInput(_) => "missing_input",
            Error::Io { .. } => "io",
        }
    }

    /// Whether a remote call that failed with this error may be retried.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            Error::Timeout { .. } | Error::Transport(_) | Error::Service { status: 429 | 500..=599, .. }
        )
    }
}
