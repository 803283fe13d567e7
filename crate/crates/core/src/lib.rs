//! Delay-resilient encoder-enhanced reinforcement learning.
//!
//! A sequence encoder is pretrained on delay-free trajectories to map an
//! information state (last observed state plus the actions issued since) to a
//! fixed-length context vector. A soft actor-critic agent then learns on those
//! vectors while acting in an environment with constant or randomly dropped,
//! delayed observations.
//!
//! Layout:
//! - [`nncore`]: tape-based reverse-mode differentiation, dense/GRU/attention
//!   blocks, Adam, checkpoints.
//! - [`envs`]: closed-form environments and expert controllers.
//! - [`rddmdp`]: the random-dropping delayed process wrapper.
//! - [`dataset`]: trajectory collection and padded training samples.
//! - [`seq2seq`]: the encoder-decoder and its pretraining loop.
//! - [`agent`]: SAC, replay, and the DEER / SACAS / DOLPS / online-DEER loops.
//! - [`experiment`]: config files, on-disk artifacts, commands and reports.

pub mod agent;
pub mod dataset;
pub mod envs;
mod error;
pub mod experiment;
pub mod nncore;
pub mod rddmdp;
pub mod seq2seq;
pub mod util;

pub use error::{Error, Result};
