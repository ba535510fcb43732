//! Spiking transformer with Fourier and wavelet token mixing.
//!
//! The crate is organised bottom-up: [`tensor`] and [`tape`] provide a small
//! dense autodiff engine, [`spiking`] the LIF neuron, [`transforms`] the FFT and
//! DWT kernels, [`heads`] the token-mixing heads, [`model`] the full network
//! and its training loop, [`profiler`] operation and energy accounting, and
//! [`data`] event-stream loading and synthetic generators.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod profiler;
pub mod spiking;
pub mod tape;
pub mod tensor;
pub mod transforms;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
