//! Top-level error type for the commands, split by process exit code.

use std::path::PathBuf;

use thiserror::Error;

use crate::adherence::AdherenceError;
use crate::dic::DicError;
use crate::efficacy::EfficacyError;
use crate::ode::OdeError;
use crate::sampler::SamplerError;
use crate::simstudy::SimError;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad input: malformed files, unknown config keys, inconsistent data.
    #[error("{0}")]
    Validation(String),
    /// A computation failed on valid input: integrator or sampler breakdown.
    #[error("{0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Validation(_) | Self::Io { .. } => 1,
            Self::Numeric(_) => 2,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}

impl From<AdherenceError> for Error {
    fn from(e: AdherenceError) -> Self {
        Self::Validation(e.to_string())
    }
}

impl From<EfficacyError> for Error {
    fn from(e: EfficacyError) -> Self {
        Self::Validation(e.to_string())
    }
}

impl From<OdeError> for Error {
    fn from(e: OdeError) -> Self {
        match e {
            OdeError::BadTimes(_) | OdeError::BadConfig(_) => Self::Validation(e.to_string()),
            _ => Self::Numeric(e.to_string()),
        }
    }
}

impl From<SamplerError> for Error {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::Hyper(_) | SamplerError::Config(_) | SamplerError::Data(_) => Self::Validation(e.to_string()),
            SamplerError::NotPositiveDefinite { .. } | SamplerError::Aborted { .. } => Self::Numeric(e.to_string()),
        }
    }
}

impl From<DicError> for Error {
    fn from(e: DicError) -> Self {
        Self::Numeric(e.to_string())
    }
}

impl From<SimError> for Error {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Design(_) | SimError::Adherence(_) | SimError::Efficacy(_) => Self::Validation(e.to_string()),
            SimError::Sampler(s) => s.into(),
            SimError::Degenerate { .. } | SimError::TooManyFailures { .. } => Self::Numeric(e.to_string()),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
