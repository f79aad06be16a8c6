//! Heteroscedastic multi-output Gaussian processes.

pub mod data;
pub mod error;
pub mod gp_core;
pub mod io;
pub mod linalg;
pub mod optim;
pub mod precision;
pub mod predict;
pub mod serde_mat;
pub mod sim;
pub mod sparse;
pub mod special;
#[cfg(test)]
mod testutil;
pub mod third_level;
pub mod vem;

pub use error::{HegpError, Result};
