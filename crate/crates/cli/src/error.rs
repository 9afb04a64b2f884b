use dslr_core::calibrate::CalibrateError;
use dslr_core::corpus::IndexError;
use dslr_core::eval::{DatasetError, EvalError};
use dslr_core::refine::RefineError;
use dslr_core::remote::RemoteError;
use dslr_core::score::ScoreError;

/// Exit codes are part of the interface; do not renumber.
pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_UPSTREAM: i32 = 3;
pub const EXIT_PARTIAL: i32 = 4;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug)]
pub enum CliError {
    /// Unreadable or malformed input files.
    Input(String),
    /// A scorer, reader or tokenizer service failed or is not configured.
    Upstream(String),
    /// Outputs were written but too many queries failed.
    Partial(String),
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Upstream(_) => EXIT_UPSTREAM,
            CliError::Partial(_) => EXIT_PARTIAL,
            CliError::Usage(_) => EXIT_USAGE,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Input(m) | CliError::Upstream(m) | CliError::Partial(m) | CliError::Usage(m) => m,
        }
    }
}

impl From<IndexError> for CliError {
    fn from(e: IndexError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<RemoteError> for CliError {
    fn from(e: RemoteError) -> Self {
        CliError::Upstream(e.to_string())
    }
}

impl From<ScoreError> for CliError {
    fn from(e: ScoreError) -> Self {
        match e {
            ScoreError::RemoteUnavailable(_) | ScoreError::RemoteMalformed(_) | ScoreError::Timeout(_) => {
                CliError::Upstream(e.to_string())
            }
            ScoreError::Config(_) => CliError::Usage(e.to_string()),
            ScoreError::EmptyCandidates | ScoreError::InvalidCandidate(_) | ScoreError::MissingScore { .. } => {
                CliError::Input(e.to_string())
            }
        }
    }
}

impl From<RefineError> for CliError {
    fn from(e: RefineError) -> Self {
        match e {
            RefineError::Score(s) => s.into(),
            RefineError::Tokenize(r) => r.into(),
            RefineError::Config(m) => CliError::Usage(m),
            RefineError::UnknownSentence { .. } => CliError::Input(e.to_string()),
        }
    }
}

impl From<CalibrateError> for CliError {
    fn from(e: CalibrateError) -> Self {
        match e {
            CalibrateError::Score(s) => s.into(),
            CalibrateError::Eval(m) => CliError::Usage(m),
            CalibrateError::BadPercentile(_) | CalibrateError::Invalid(_) => CliError::Usage(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}
