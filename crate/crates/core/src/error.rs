use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Everything that can go wrong while loading, scoring, calibrating or
/// evaluating.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },

    #[error("{}record `{image_id}`, field `{field}`: {problem}", line_prefix(.line))]
    InvalidRecord {
        line: Option<usize>,
        image_id: String,
        field: String,
        problem: RecordProblem,
    },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("generator mismatch: expected `{expected}`, found `{found}` (record `{image_id}`)")]
    GeneratorMismatch {
        expected: String,
        found: String,
        image_id: String,
    },

    #[error("single-class input: {0}")]
    SingleClass(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid model: {0}")]
    Model(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("non-finite optimizer update at coordinate {index}")]
    NonFiniteUpdate { index: usize },

    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the file system rather than of the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}

fn line_prefix(line: &Option<usize>) -> String {
    match line {
        Some(n) => format!("line {n}: "),
        None => String::new(),
    }
}

/// What exactly is wrong with a record.
#[derive(Debug, Clone, PartialEq)]
pub enum RecordProblem {
    NonFinite {
        index: usize,
    },
    LengthMismatch {
        cond: usize,
        uncond: usize,
    },
    EmptyScale,
    NoScales,
    ScaleIndex {
        expected: usize,
        found: usize,
    },
    Layout {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

impl fmt::Display for RecordProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecordProblem::NonFinite { index } => write!(f, "non-finite value at token {index}"),
            RecordProblem::LengthMismatch { cond, uncond } => write!(
                f,
                "shape error: log_p_cond has {cond} tokens but log_p_uncond has {uncond}"
            ),
            RecordProblem::EmptyScale => write!(f, "shape error: scale has no tokens"),
            RecordProblem::NoScales => write!(f, "shape error: record has no scales"),
            RecordProblem::ScaleIndex { expected, found } => {
                write!(f, "expected scale_index {expected}, found {found}")
            }
            RecordProblem::Layout { expected, found } => write!(
                f,
                "shape error: token layout {found:?} differs from {expected:?}"
            ),
        }
    }
}
