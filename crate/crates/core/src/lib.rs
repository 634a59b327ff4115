//! Hierarchical meta-reinforcement learning on toy meta-task suites.
//!
//! Three layers are trained with independent objectives:
//! - [`highlevel`]: a GRU task encoder producing a categorical task
//!   representation `y`, trained through a value head.
//! - [`intermediate`]: a VAE whose encoder emits a tanh-Gaussian macro-action
//!   `z` and whose decoder predicts the ego state `M` steps ahead.
//! - [`lowlevel`]: a PPO policy over `(y, z, s)` rewarded for following the
//!   sign of `z`.
//!
//! [`trainer`] drives collection, replay and updates; [`oracle`] holds the
//! independent closed-form checks; [`cli`] is the command-line surface.

pub mod cli;
pub mod config;
pub mod envs;
pub mod error;
pub mod exec;
pub mod highlevel;
pub mod intermediate;
pub mod lowlevel;
pub mod numerics;
pub mod oracle;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
