//! Coarse-to-fine image retrieval.
//!
//! A query is first compared against every database image with a
//! square-rooted HSV color histogram. The top-K images by cosine similarity
//! survive, and their holistic scores become adaptive weights. The survivors
//! are then re-scored with a Hamming-embedding bag-of-visual-words inverted
//! index, and the final score is the local score times the weight.

pub mod cli;
pub mod codebook;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod holistic;
pub mod index;
pub mod synthgen;
pub mod weighting;

mod binio;

pub use error::{Error, Result};

/// Position of an image in the database.
pub type ImageId = u32;
/// Visual word index in `0..k`.
pub type WordId = u32;
