//! Frequency and amplitude tracking of decaying precession signals.
//!
//! The main estimator is an extended Kalman smoother that runs on block-wise
//! DFT coefficients around the carrier, with hyperparameters tuned by
//! expectation maximization ([`em::fit_em`]). A variable-projection
//! sine-cosine fit ([`scf::fit_blocks`]) serves as the reference method, and
//! [`bench`] compares both on simulated records ([`signal::simulate_fpd`]).
//!
//! All numeric routines are generic over [`Real`] (`f32` or `f64`); the
//! aliases at the crate root fix the scalar to `f64`.

// `!(x > 0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod cli;
pub mod em;
pub mod error;
pub mod io;
pub mod kalman;
pub mod linalg;
pub mod real;
pub mod scf;
pub mod signal;
pub mod spectral;

pub use error::{Error, Result};
pub use real::Real;

pub type TimeSeries64 = signal::TimeSeries<f64>;
pub type FrequencyTrack64 = signal::FrequencyTrack<f64>;
pub type State64 = kalman::State5<f64>;
pub type HyperParams64 = kalman::HyperParams<f64>;
pub type TrackResult64 = kalman::TrackResult<f64>;
pub type EmReport64 = em::EmReport<f64>;
pub type ScfBlockFit64 = scf::ScfBlockFit<f64>;
pub type Matrix64 = linalg::Matrix<f64>;

pub type TimeSeries32 = signal::TimeSeries<f32>;
pub type TrackResult32 = kalman::TrackResult<f32>;
