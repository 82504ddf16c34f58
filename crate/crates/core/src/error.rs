use crate::autodiff::AutodiffError;
use crate::data::DataError;
use crate::linalg::LinalgError;
use crate::model::ModelError;
use crate::objective::ObjectiveError;
use crate::train::TrainError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Any failure surfaced by the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Coarse failure class, used by the command-line driver to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Linalg(_) | Error::Autodiff(_) | Error::Objective(_) => ErrorKind::Numerical,
            Error::Model(e) => e.kind(),
            Error::Data(_) => ErrorKind::Data,
            Error::Train(e) => e.kind(),
        }
    }
}

impl ModelError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            ModelError::Linalg(_) | ModelError::DegenerateAnomaly => ErrorKind::Numerical,
            ModelError::Data(_) => ErrorKind::Data,
            _ => ErrorKind::Config,
        }
    }
}
