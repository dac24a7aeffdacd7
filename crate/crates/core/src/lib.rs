//! Potential customer lifetime value (PCLV) from Open Banking data.
//!
//! The pipeline trains a churn classifier and a contribution-margin
//! regressor on a focal institution's ledger, transfers the regressor onto
//! competitor exposures shared through Open Banking, and values every
//! customer's actual and potential lifetime value. Tercile migration
//! reports compare the segmentation before and after adding the potential.

pub mod boosting;
pub mod datagen;
pub mod domain;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod hpo;
pub mod matrix;
pub mod pipeline;
pub mod resampling;
pub mod segmentation;
pub mod valuation;

pub use error::{PclvError, Result};
pub use matrix::Matrix;
