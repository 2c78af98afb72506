//! Hybrid quadratic-linear sequence memory, from scratch.
//!
//! Two elementary memory systems — a sliding-window key-value memory read by
//! softmax attention, and a fast-weight matrix memory updated by linear or
//! delta-rule outer products — combined per attention head under three
//! hybridization schemes (delayed-stream, delayed-chunk, synchronous) and
//! three output mixers (sum, dynamic scalar, dynamic vector).
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — dense f64 tensors and a tape-based reverse-mode autodiff
//!   engine covering every primitive the layers need;
//! * [`memory`] — the two memory systems and their update/read rules;
//! * [`hybrid`] — one hybrid attention layer: per-head orchestration of both
//!   memories under a configured scheme and mixer;
//! * [`model`] — stacks hybrid layers into a trainable sequence classifier;
//! * [`tasks`] — parity and modular-arithmetic generators and scorers;
//! * [`trainer`] — Adam training loop with learning-rate sweeps;
//! * [`oracles`] — independent straight-line reference implementations used
//!   to validate the engine;
//! * [`verify`] — runnable check suites built on the oracles.
//!
//! The crate is `no_std`-compatible (with `alloc`); IO, file formats and the
//! CLI live in the companion `hqlt-cli` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod hybrid;
pub mod linalg;
pub mod math;
pub mod memory;
pub mod model;
pub mod oracles;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::Error;
