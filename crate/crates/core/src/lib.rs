//! Outcome-aware spectral feature learning for nonparametric
//! instrumental-variable regression, with a controlled synthetic benchmark,
//! feature-space 2SLS, alignment diagnostics and iterative off-policy
//! evaluation on tabular MDPs.

pub mod alignment;
pub mod error;
pub mod experiment;
pub mod features;
pub mod linalg;
pub mod ope;
pub mod spectral_loss;
pub mod svg;
pub mod synthgen;
pub mod twosls;

pub use error::{Error, Result};
