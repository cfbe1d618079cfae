//! Divide-and-conquer holistic cue training for ultra-fine-grained
//! classification, on a small reverse-mode autodiff engine.

pub mod error;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub mod backbone;
pub mod hcl;
pub mod hce;
pub mod losses;
pub mod data;
pub mod parallel;
pub mod train;
pub mod gradsuite;
