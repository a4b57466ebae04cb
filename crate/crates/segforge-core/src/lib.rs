//! Core library of segforge: a small, dependency-light segmentation stack.
//!
//! Everything numeric is built on one dense `Tensor` type and a single-use
//! autodiff `Tape`. Layers above (blocks, model, data, training) only ever
//! talk to those two, so determinism and gradient correctness are properties
//! of one small kernel set instead of the whole codebase.
//!
//! Reproducibility contract: for a fixed seed and `--threads 1`, every
//! public operation is a pure function of its inputs. Kernels accumulate in
//! a fixed order (see `kernels`), and all randomness flows from one root
//! seed through labeled streams (see `rng`).

pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod element;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
