//! Memory-driven Transformer engine for multivariate long-horizon
//! time-series forecasting.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: flat row-major `f64` tensors with reverse-mode automatic
//!   differentiation on an explicit tape.
//! - [`data`]: CSV ingestion, chronological splits, z-score normalization,
//!   rolling-window enumeration, calendar features, and a synthetic
//!   multivariate generator.
//! - [`embedding`]: scalar-context projection plus positional and calendar
//!   encodings that lift raw windows into model space.
//! - [`memory`]: the relational task-level memory — multi-head slot
//!   attention, gated updates, and memory-driven conditional layer
//!   normalization (MDCLN) — with a versioned persistence format.
//! - [`model`]: the encoder–decoder Transformer backbone with one-shot
//!   (non-autoregressive) decoding, conditioned on the memory via MDCLN.
//! - [`train`]: curriculum-dropout schedule, Adam, early stopping, the
//!   training loop, evaluation metrics, and naive baselines.
//! - [`checkpoint`]: self-describing binary checkpoints (text manifest +
//!   little-endian arrays).
//! - [`config`]: plain-text dotted-key run configuration with
//!   horizon-bucketed defaults.
//! - [`selfcheck`]: the gradient/invariant self-test battery behind the
//!   CLI's `selfcheck` verb.
//! - [`cli`]: the command implementations behind the `memcast` binary.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod embedding;
pub mod error;
pub mod memory;
pub mod model;
pub mod selfcheck;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
