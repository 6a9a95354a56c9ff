//! Propensity-score pseudo-weights for non-probability cohorts, with
//! linearization and jackknife variance estimation.

pub mod cli;
pub mod data;
pub mod error;
pub mod estimation;
pub mod numeric;
pub mod par;
pub mod propensity;
pub mod simulation;
pub mod weights;

pub use error::{Error, Result};
