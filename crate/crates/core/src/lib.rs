//! Quantized reward conditioning for small language models trained from scratch.
//!
//! The crate covers the whole pipeline: a reverse-mode [`autodiff`] engine,
//! a decoder-only transformer in [`model`], the reward-sorted [`datapool`],
//! [`rewards`], the explore/quantize/learn loop in [`training`], and the
//! evaluation [`metrics`].

pub mod autodiff;
pub mod cli;
pub mod datapool;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rewards;
pub mod rng;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
