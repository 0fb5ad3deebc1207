//! Copresence verification from room impulse responses.
//!
//! Two devices that share a room hear the same reverberation. The verifier
//! plays a linear sine sweep, both devices record it, and each recording is
//! deconvolved into a room impulse response. Reverberation features of the
//! two responses are compared by a random-forest classifier to decide whether
//! the devices are copresent.

pub mod dsp;
pub mod classifier;
pub mod error;
pub mod features;
pub mod pipeline;
pub mod protocol;
pub mod rir;
pub mod signal;
pub mod simulator;

pub use error::{Error, Result};
