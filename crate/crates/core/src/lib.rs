//! Differentiable weighted bundle adjustment.

pub mod error;
pub mod lie;
pub mod projective;
pub mod scene;
pub mod ba;
pub mod backward;
pub mod synth;
pub mod losses;
pub mod trainer;
pub mod analysis;

pub use error::{Error, Result};
