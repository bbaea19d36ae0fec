//! Out-of-domain GAN inversion by invertibility decomposition.
//!
//! A frozen style-based generator and encoder invert the in-domain part of
//! an image; an alignment-and-masking module warps generator features
//! toward encoder features and predicts where the generator cannot follow.
//! The gathered mask then copies those pixels straight from the input.

pub mod compose;
pub mod data;
pub mod edit;
pub mod error;
pub mod io;
pub mod losses;
pub mod nets;
pub mod pipeline;
pub mod samm;
pub mod train;

pub use error::{Error, Result};
