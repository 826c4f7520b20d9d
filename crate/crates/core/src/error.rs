use thiserror::Error;

use crate::aggdata::DataError;
use crate::cate::CateError;
use crate::estimands::EstimandError;
use crate::gmm::GmmError;
use crate::inference::InferenceError;
use crate::simulate::SimError;
use crate::synthpop::SynthError;
use crate::tilting::TiltError;

/// Crate-level error. Every variant carries the module it came from so that
/// front ends can print module-tagged messages.
#[derive(Debug, Error)]
pub enum Error {
    #[error("aggdata: {0}")]
    Data(#[from] DataError),
    #[error("tilting: {0}")]
    Tilt(#[from] TiltError),
    #[error("cate: {0}")]
    Cate(#[from] CateError),
    #[error("gmm: {0}")]
    Gmm(#[from] GmmError),
    #[error("inference: {0}")]
    Inference(#[from] InferenceError),
    #[error("estimands: {0}")]
    Estimand(#[from] EstimandError),
    #[error("synthpop: {0}")]
    Synth(#[from] SynthError),
    #[error("simulate: {0}")]
    Sim(#[from] SimError),
}

impl Error {
    /// True when the failure stems from malformed or inconsistent inputs rather
    /// than from a numerical routine.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Data(_) | Error::Cate(_) => true,
            Error::Estimand(e) => e.is_input_error(),
            Error::Synth(e) => e.is_input_error(),
            Error::Sim(e) => e.is_input_error(),
            Error::Gmm(e) => e.is_input_error(),
            Error::Tilt(_) | Error::Inference(_) => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
