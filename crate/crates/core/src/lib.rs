//! Masked predictive coding (MPC) pre-training, its streaming MPC+APC
//! extension and knowledge-transfer fine-tuning for small Transformer
//! speech encoders, built on a self-contained autodiff core.

pub mod error;
pub mod features;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod pipeline;
pub mod schedules;

pub use error::{Error, Result};
