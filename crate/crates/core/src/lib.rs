//! Small-footprint keyword spotting with a feedforward acoustic model and
//! CTC keyword scoring.
//!
//! The pipeline runs audio through a log mel filterbank front end
//! ([`features`]), maps stacked context frames to per-frame phoneme posteriors
//! ([`network`]), and scores a keyword's phoneme sequence over sliding windows
//! with the CTC forward algorithm ([`ctc`], [`spotter`]). Models are trained
//! under the CTC objective by [`trainer`] and evaluated with [`eval`].

pub mod ctc;
pub mod error;
pub mod eval;
pub mod features;
pub mod io;
pub mod network;
pub mod spotter;
pub mod synth;
pub mod trainer;

pub use error::{KwsError, Result};
