//! Relative flatness, feature robustness and representativeness of trained networks.

pub mod datasets;
pub mod error;
pub mod expcli;
pub mod flatness;
pub mod hessian;
pub mod net;
pub mod numkit;
pub mod parallel;
pub mod reparam;
pub mod representativeness;
pub mod robustness;

pub use error::{Error, Result};
