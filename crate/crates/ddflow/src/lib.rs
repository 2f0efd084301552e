//! Invertible flows over categorical data.
//!
//! The library trains stacks of conditional-permutation coupling layers on
//! categorical grids (flat vectors or channel/height/width maps), greedily and
//! layer by layer: each new classifier net is fitted to predict one half of the
//! transformed data from the other, then frozen into a permutation layer that
//! moves predictable classes toward class 0. A factorized categorical base
//! distribution over the final latent gives exact log-likelihoods (reported as
//! bits per dimension), ancestral sampling, and code tables for a lossless
//! rANS codec.
//!
//! Modules:
//! - [`grid`]: categorical array/dataset types, file I/O, toy data generator.
//! - [`neural`]: dense and convolutional classifier nets with explicit
//!   backprop and Adam.
//! - [`flow`]: coupling/shuffle/squeeze/splitprior layers and the frozen
//!   [`flow::FlowModel`].
//! - [`train`]: greedy layer-wise training driven by a [`train::FlowSpec`].
//! - [`likelihood`]: base-distribution fitting and exact BPD evaluation.
//! - [`codec`]: model-driven lossless compression (rANS).
//! - [`check`]: self-contained verification suites (oracles, round trips,
//!   gradient checks) shared by the CLI `verify` subcommand and the test
//!   harness.

pub mod check;
pub mod codec;
pub mod error;
pub mod flow;
pub mod grid;
pub mod likelihood;
pub mod neural;
pub mod ppm;
pub mod train;

pub use error::{Error, Result};
