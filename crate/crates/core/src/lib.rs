//! Multiscale audio spectrogram transformer with pooling attention,
//! relative position bias, and student/teacher contrastive pretraining,
//! built on a small CPU tensor engine.

mod error;
pub mod attention;
pub mod frontend;
pub mod harness;
pub mod model;
pub mod ssl;
pub mod numerics;

pub use error::{Error, Result};
