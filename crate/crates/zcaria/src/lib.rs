//! Zero-correlation linear cryptanalysis workbench for ARIA-style SPN ciphers.
//!
//! The crate models a width-parametric 16-cell SPN with the ARIA diffusion
//! matrix, proves 4-round zero-correlation hulls with a symbolic
//! miss-in-the-middle engine, and runs desk-scale key-recovery experiments
//! with two acceleration techniques: staged partial-sum counter compression
//! and Walsh-Hadamard (circulant "FFT") correlation evaluation. A plan mode
//! reports the full-scale data/time/memory figures for the 6- and 7-round
//! attacks without executing them.

pub mod attack;
pub mod cipher;
pub mod counters;
pub mod error;
pub mod fwht;
pub mod masks;
pub mod pairs;
pub mod partial_sum;
pub mod stats;

pub use error::{Error, Result};
