// SPDX-License-Identifier: MIT OR Apache-2.0

//! Field-theoretic response analysis for activation patching.
//!
//! A small decoder-only transformer with exact reverse- and forward-mode
//! derivatives, plus the measurements built on it: sensitivity fields,
//! residual response fields, composition tests, sliced Green operators,
//! prompt-displacement analysis, inverse patch inference and cross-scale
//! response transfer.

pub mod autodiff;
pub mod error;
pub mod field;
pub mod harness;
pub mod inference;
pub mod intervention;
pub mod metrics;
pub mod model;
pub mod numeric;
pub mod transfer;

pub use error::{Error, Result};
pub use field::{Field, ResidualField, ResponseField, SensitivityField, Site, TangentField};
pub use model::{Model, ModelConfig, Observable, ReadoutMode};
