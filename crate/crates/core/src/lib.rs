//! Desk-scale multi-subject diffusion transformer: multi-modal attention over
//! condition, prompt and noise tokens, static and dynamic attention routing,
//! segment-gated adapters, rectified-flow training and evaluation tooling.

pub mod cli;
pub mod data;
pub mod error;
pub mod layout;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pgm;
pub mod routing;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
