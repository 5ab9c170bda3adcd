//! Error-to-exit-code mapping.
//!
//! 2 = configuration, 3 = I/O, 4 = simulation/processing, 5 = non-finite
//! training abort.

use std::fmt;

use thermodepth::eval::EvalError;
use thermodepth::heatsim::HeatsimError;
use thermodepth::manifest::ManifestError;
use thermodepth::model::ModelError;
use thermodepth::pgm::PgmError;
use thermodepth::reconstruct::ReconstructError;
use thermodepth::training::TrainError;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Processing(String),
    NonFinite(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Processing(_) => 4,
            CliError::NonFinite(_) => 5,
        }
    }

    pub fn io(path: &std::path::Path, err: std::io::Error) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration: {m}"),
            CliError::Io(m) => write!(f, "I/O: {m}"),
            CliError::Processing(m) => write!(f, "processing: {m}"),
            CliError::NonFinite(m) => write!(f, "training aborted: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<HeatsimError> for CliError {
    fn from(e: HeatsimError) -> Self {
        match e {
            HeatsimError::InvalidConfig { .. } | HeatsimError::CalibrationError { .. } => {
                CliError::Config(e.to_string())
            }
            HeatsimError::StabilityViolation { .. } | HeatsimError::InvalidDepth { .. } => {
                CliError::Processing(e.to_string())
            }
        }
    }
}

impl From<ReconstructError> for CliError {
    fn from(e: ReconstructError) -> Self {
        CliError::Processing(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteAbort { .. } => CliError::NonFinite(e.to_string()),
            TrainError::Model(ModelError::NonFinite { .. }) => CliError::NonFinite(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::NonFinite { .. } => CliError::NonFinite(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Train(t) => t.into(),
            EvalError::Model(m) => m.into(),
            EvalError::Reconstruct(r) => r.into(),
            other => CliError::Processing(other.to_string()),
        }
    }
}

impl From<ManifestError> for CliError {
    fn from(e: ManifestError) -> Self {
        match e {
            ManifestError::Json(j) => CliError::Config(j.to_string()),
            other => CliError::Processing(other.to_string()),
        }
    }
}

impl From<PgmError> for CliError {
    fn from(e: PgmError) -> Self {
        match e {
            PgmError::Io(io) => CliError::Io(io.to_string()),
            other => CliError::Processing(other.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Config(e.to_string())
    }
}
