// SPDX-License-Identifier: Apache-2.0

use thiserror::Error;

use crate::augment::AugmentError;
use crate::data::DataError;
use crate::hamming::IndexError;
use crate::metrics::MetricError;
use crate::nn::NnError;
use crate::objectives::ObjectiveError;
use crate::trainer::TrainError;

/// Crate-level error, one variant per module.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
