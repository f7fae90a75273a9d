use thiserror::Error;

use crate::alignment::AlignmentError;
use crate::features::FeatureError;
use crate::linalg::LinalgError;
use crate::ope::OpeError;
use crate::spectral_loss::LossError;
use crate::synthgen::SynthError;
use crate::twosls::TwoSlsError;

/// Any failure raised by the library, grouped by the stage that produced it.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    TwoSls(#[from] TwoSlsError),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    Ope(#[from] OpeError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short stage name used to tag failed cells in result tables.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::Linalg(_) => "linalg",
            Error::Synth(_) => "synth",
            Error::Feature(_) => "features",
            Error::Loss(_) => "train",
            Error::TwoSls(_) => "2sls",
            Error::Alignment(_) => "alignment",
            Error::Ope(OpeError::Diverged { .. }) => "diverged",
            Error::Ope(_) => "ope",
            Error::Config(_) => "config",
            Error::Io(_) | Error::Csv(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
