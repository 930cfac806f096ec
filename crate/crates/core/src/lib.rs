//! Targeted maximum likelihood estimation and mechanistic-interpretability
//! primitives for small multi-task nuisance networks.
//!
//! The crate is `no_std` (it needs `alloc`). Everything here is a pure
//! function of its inputs and an explicit seed; file formats, configuration
//! and the command line live in the `tmle-lens` companion crate.
//!
//! Module map:
//!
//! - [`dgp`]: synthetic observational data with a known average treatment effect.
//! - [`nnet`]: the shared-trunk network with an outcome head and a propensity head.
//! - [`causal`]: TMLE with influence-curve inference, plus G-computation, IPW and the naive contrast.
//! - [`probes`]: linear probes on trunk activations and probe-derived neuron importance.
//! - [`intervene`]: ablation and activation patching, and the ablation study.
//! - [`trace`]: layer-by-layer causal tracing into pathway graphs.
//! - [`decomp`]: sparse autoencoders and transcoders.
//! - [`synthgen`]: new datasets generated by rescaling identified network parameters.
#![no_std]
#![warn(missing_debug_implementations)]

extern crate alloc;

pub mod causal;
pub mod decomp;
pub mod dgp;
mod error;
pub mod intervene;
pub mod matrix;
pub mod nnet;
pub mod optim;
pub mod probes;
pub mod rng;
pub mod stats;
pub mod synthgen;
pub mod trace;

pub use error::{Error, Result};
pub use matrix::Matrix;
