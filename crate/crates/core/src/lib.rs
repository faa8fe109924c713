//! Attribute-conditioned image-to-image translation with label-based and
//! reference-based style codes, plus the synthetic dataset, metrics and
//! training loop used to exercise it.

pub mod attrs;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod error;
pub mod eval;
pub mod imageio;
pub mod losses;
pub mod nets;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
