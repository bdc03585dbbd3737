//! FCMNet: multi-agent reinforcement learning with parallel recurrent
//! communication channels, trained end to end with PPO.

// Index loops mirror the math in numeric kernels; `!(x > 0.0)` rejects NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod arch;
pub mod disturbance;
pub mod env;
pub mod error;
pub mod harness;
pub mod ppo;
pub mod recurrent;
pub mod seeding;
pub mod tensor;

pub use error::{Error, Result};
