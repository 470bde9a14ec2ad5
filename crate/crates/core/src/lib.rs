//! One-step average-velocity generator lab: networks, objectives, guidance, samplers, metrics
//! and the analytic Gaussian oracle, on top of `imf-autodiff`.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod guidance;
pub mod metrics;
pub mod nets;
pub mod objectives;
pub mod optim;
pub mod par;
pub mod oracle;
pub mod rng;
pub mod run;
pub mod sampler;

pub use error::{LabError, Result};
