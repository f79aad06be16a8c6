//! Variational EM for the three-level model.

pub mod backend;
pub mod config;
pub mod cv;
pub mod estep;
pub mod fit;
pub mod mstep;
pub mod state;
pub mod upsilon;

pub use config::{EstepMethod, FitConfig, InducedSpec, ModelFamily, PriorSpec, SparseSpec, UpsilonMode};
pub use fit::{fit, fit_from, fit_hegpr_g, initialize};
pub use state::{EMState, HegpModel, VariationalState};
