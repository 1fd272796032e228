use std::fmt;
use std::path::Path;

use probelab::model::ModelError;
use probelab::objectives::ObjectiveError;
use probelab::probing::ProbeError;
use probelab::tokenizer::TokenizerError;
use probelab::training::TrainError;

/// Failure classes, each with its own process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or config; exit 1.
    Usage(String),
    /// Unreadable or malformed inputs; exit 2.
    Data(String),
    /// Non-finite loss or gradient; exit 3.
    Numeric(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Numeric(_) => 3,
        }
    }

    /// Prefixes the message with the file it concerns, keeping the class.
    pub fn at(self, path: &Path) -> Self {
        let p = path.display();
        match self {
            Self::Usage(m) => Self::Usage(format!("{p}: {m}")),
            Self::Data(m) => Self::Data(format!("{p}: {m}")),
            Self::Numeric(m) => Self::Numeric(format!("{p}: {m}")),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "usage: {m}"),
            Self::Data(m) => write!(f, "data: {m}"),
            Self::Numeric(m) => write!(f, "numeric: {m}"),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Attaches a path to any error convertible into [`CliError`].
pub fn at<E: Into<CliError>>(path: &Path) -> impl FnOnce(E) -> CliError + '_ {
    move |e| e.into().at(path)
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) | ModelError::HeadMismatch(_) => Self::Usage(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<TokenizerError> for CliError {
    fn from(e: TokenizerError) -> Self {
        match e {
            TokenizerError::VocabTooSmall { .. } | TokenizerError::MaxLenTooSmall(_) => Self::Usage(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<ObjectiveError> for CliError {
    fn from(e: ObjectiveError) -> Self {
        match e {
            ObjectiveError::BadRate(_) | ObjectiveError::UnknownObjective(_) => Self::Usage(e.to_string()),
            ObjectiveError::Tokenizer(t) => t.into(),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) => Self::Usage(e.to_string()),
            TrainError::NonFiniteGradient(_) | TrainError::NonFiniteLoss { .. } => Self::Numeric(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Objective(o) => o.into(),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<ProbeError> for CliError {
    fn from(e: ProbeError) -> Self {
        match e {
            ProbeError::Numeric(_) => Self::Numeric(e.to_string()),
            ProbeError::ThreadPool(_) => Self::Usage(e.to_string()),
            ProbeError::Model(m) => m.into(),
            _ => Self::Data(e.to_string()),
        }
    }
}
