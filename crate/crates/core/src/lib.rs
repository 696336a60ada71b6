//! Utterance-level permutation invariant training (uPIT) for single-channel,
//! speaker-independent multi-talker speech separation.
//!
//! The crate is `no_std` and only needs `alloc`. It covers the whole numeric
//! pipeline: STFT analysis and overlap-add synthesis ([`dsp`]), ideal masks
//! ([`masks`]), the permutation-invariant losses ([`pit`]), a small recurrent
//! mask estimator with hand-written gradients ([`model`]), SGD training loops
//! ([`train`]), mixture synthesis ([`mixgen`]) and SDR based evaluation
//! ([`eval`]). File formats, audio IO and the command line live in the `upit`
//! crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
mod fft;
pub mod masks;
pub mod mixgen;
pub mod model;
pub mod pit;
pub mod toy;
pub mod train;

pub use error::{Error, Result};

/// Denominator floor used by the mask definitions and the PSM target.
pub const DEFAULT_EPSILON: f64 = 1e-8;
