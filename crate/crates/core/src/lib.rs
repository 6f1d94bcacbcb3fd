//! Detect-and-match for video decoration with sound effects: key-moment
//! detection and moment-to-SFX matching over precomputed features, with a
//! self-contained training substrate, a sliding-window baseline and a
//! pooled-AP evaluation harness.

pub mod data;
pub mod model;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod matching;
pub mod rngutil;
pub mod tensor;
pub mod train;

pub use error::{DmError, Result};
