//! Non-autoregressive image captioning trained with counterfactual
//! multi-agent policy gradients, on a synthetic captioning task.

pub mod autodiff;
pub mod error;

pub use error::{Error, Result};
pub mod model;
pub mod cmal;
pub mod metrics;
pub mod oracle;
pub mod synth;
pub mod pipeline;
