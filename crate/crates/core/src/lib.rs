//! Noise-robust speech emotion recognition with SNR-aware feature refinement.

pub mod bridge;
pub mod corpus;
pub mod dsp;
pub mod enhance;
pub mod error;
pub mod evalkit;
pub mod model;
pub mod pipeline;
pub mod selfcheck;
pub mod ser;
pub mod snr_aware;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
