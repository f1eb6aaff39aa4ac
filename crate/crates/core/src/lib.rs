//! Flow-matching generation with layerwise timestep experts and
//! timestep-conditioned residual attention, at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode tape.
//! - [`flowmatch`]: the linear probability path, the CFM loss and the
//!   guided Euler sampler.
//! - [`schedule`]: timestep intervals per expert group and routing.
//! - [`attention`]: rotary tables, head-wise gates, the split
//!   self/cross-attention block with residual maps, and map similarity.
//! - [`model`]: the context pathway, expert groups, conditioning cache and
//!   checkpoints.
//! - [`data`], [`train`], [`eval`]: synthetic datasets, the optimization
//!   loop, and metrics/diagnostics.
//! - [`config`] and [`commands`]: run configuration files and the
//!   subcommands behind the `latte` binary.

pub mod attention;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod flowmatch;
pub mod model;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor, Var};
