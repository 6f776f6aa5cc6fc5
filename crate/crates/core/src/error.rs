use thiserror::Error;

use crate::cluster::ClusterError;
use crate::decomp::DecompError;
use crate::ingest::IngestError;
use crate::matrix::MatrixError;
use crate::reduce::ReduceError;
use crate::synth::SynthError;
use crate::tails::TailsError;

#[derive(Debug, Error, PartialEq)]
pub enum Error {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
    #[error(transparent)]
    Tails(#[from] TailsError),
    #[error(transparent)]
    Decomp(#[from] DecompError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Reduce(#[from] ReduceError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

/// Coarse failure class, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use ErrorKind::*;
        match self {
            Error::Ingest(_) => Validation,
            Error::Matrix(MatrixError::DegenerateDistribution) => Numerical,
            Error::Matrix(_) => Validation,
            Error::Tails(TailsError::EmptySequence | TailsError::Unachievable { .. }) => Numerical,
            Error::Tails(_) => Validation,
            Error::Decomp(DecompError::TooSmall(_)) => Validation,
            Error::Decomp(_) => Numerical,
            Error::Cluster(ClusterError::DegenerateMatrix) => Numerical,
            Error::Cluster(_) => Validation,
            Error::Reduce(ReduceError::DegenerateDistribution | ReduceError::EmptyDistribution) => {
                Numerical
            }
            Error::Reduce(_) => Validation,
            Error::Synth(SynthError::InvalidConfig(_)) => Validation,
            Error::Synth(SynthError::Decomp(_)) => Numerical,
            Error::Synth(SynthError::Cluster(_)) => Numerical,
        }
    }
}
