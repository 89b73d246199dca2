//! Multi-scale feature interaction network for traffic accident
//! anticipation.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors with a tape-based reverse-mode autodiff engine
//!   and a finite-difference gradient checker.
//! * [`attention`]: self-, cross- and causal temporal attention blocks.
//! * [`multiscale`]: short/mid/long-term temporal pooling with per-scale fusion.
//! * [`model`]: the end-to-end network, its parameters and checkpoints.
//! * [`loss`]: exponential-decay and focal-exponential losses.
//! * [`metrics`]: AP, AP@80R, TTA, mTTA, TTA@80R and the mTTA-AP curve.
//! * [`synthetic`]: seeded scenario generator with planted risk signatures.
//! * [`feature_io`]: the `MSFD` feature container and raw tensor import.
//! * [`harness`]: training, evaluation, ablation and inference drivers.

pub mod attention;
pub mod error;
pub mod feature_io;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod multiscale;
pub mod params;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
