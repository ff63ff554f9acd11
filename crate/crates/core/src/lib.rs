//! Multi-label class-incremental learning with feature purification,
//! recall enhancement and unknown-class probing.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod probe;
pub mod purifier;
pub mod recall;
pub mod runner;
pub mod tensor;

pub use error::{HcpError, Result};
