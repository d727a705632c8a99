//! Adaptive feature normalization for robustness to extraneous variables.
//!
//! The crate bundles a small reverse-mode tensor engine ([`tape`]), a single
//! normalization layer covering every valid scheme/averaging/statistic
//! combination ([`normalization`]), the sensor DenseNet and an image CNN
//! ([`models`]), synthetic benchmarks with extraneous-variable shift
//! ([`data`]), Adam training ([`optim`]), per-filter moment diagnostics
//! ([`diagnostics`]) and extraneous-variable decoding probes
//! ([`invariance`]). [`experiments`] wires them into the desk-scale
//! benchmark pipeline.

pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod invariance;
pub mod models;
pub mod normalization;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use normalization::{
    enumerate_valid_configs, Averaging, ChannelStats, NormScheme, NormSpec, NormState, RunningStats,
    Statistic,
};
pub use tape::{Gradients, PaddingMode, Tape, Var};
pub use tensor::{moment_stats, Moments, Scalar, Tensor};
