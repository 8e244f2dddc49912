// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scalar diagnostics of the response formalism.

pub mod displacement;
pub mod green;
pub mod linearity;
pub mod prediction;
pub mod sites;

pub use displacement::{
    answer_rank, direction_angles, prompt_displacement, toward_fraction, DisplacementReport, PromptPair,
};
pub use green::{green_slice, slice_concentration, Concentration, GreenMethod, GreenSlice};
pub use linearity::{linearity_sweep, superposition_sweep, SlopeBand, LinearityReport, DEFAULT_TAU};
pub use prediction::{predict_dy, prediction_errors, PredictionRecord, PredictionSummary, Regime};
pub use sites::{site_scores, SiteScoreField};
