//! A cross-embodiment transformer imitation-learning policy at desk scale.
//!
//! Heterogeneous observations from four toy embodiments are tokenized into
//! a fixed-slot window, processed by a block-wise causal transformer, and
//! decoded by one action head per action space. See the crate `examples/`
//! directory for runnable entry points.

pub mod assembler;
pub mod autodiff;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod datapipe;
pub mod encoders;
pub mod envs;
pub mod error;
pub mod heads;
pub mod model;
pub mod rng;
pub mod trainer;

pub use config::Config;
pub use error::{Error, Result};
pub use model::PolicyModel;
