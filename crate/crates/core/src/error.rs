use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate ensemble: at least 2 members required, got {0}")]
    DegenerateEnsemble(usize),

    #[error("innovation covariance not positive definite after {attempts} jitter attempts")]
    SingularInnovationCovariance { attempts: usize },

    #[error("numerical blowup at time index {time_index}{}{}",
        .member.map(|m| format!(", member {m}")).unwrap_or_default(),
        .trajectory.map(|k| format!(", trajectory {k}")).unwrap_or_default())]
    NumericalBlowup {
        time_index: usize,
        member: Option<usize>,
        trajectory: Option<usize>,
    },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    TrainingDiverged { epoch: usize },

    #[error("empty training dataset")]
    EmptyDataset,

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("provenance error: {0}")]
    Provenance(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u64, expected: u64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("misaligned series: {0}")]
    Misaligned(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Attach a member index to a blowup raised by a single-state propagation.
    pub fn with_member(self, n: usize) -> Self {
        match self {
            Error::NumericalBlowup {
                time_index, trajectory, ..
            } => Error::NumericalBlowup {
                time_index,
                member: Some(n),
                trajectory,
            },
            other => other,
        }
    }

    pub fn with_trajectory(self, k: usize) -> Self {
        match self {
            Error::NumericalBlowup { time_index, member, .. } => Error::NumericalBlowup {
                time_index,
                member,
                trajectory: Some(k),
            },
            other => other,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Contract(_) | Error::ShapeMismatch(_) => 2,
            Error::Provenance(_) | Error::Misaligned(_) => 3,
            Error::NumericalBlowup { .. }
            | Error::SingularInnovationCovariance { .. }
            | Error::DegenerateEnsemble(_) => 4,
            Error::TrainingDiverged { .. } | Error::EmptyDataset => 5,
            Error::VersionMismatch { .. } | Error::Corrupt(_) | Error::Io { .. } => 1,
        }
    }
}
