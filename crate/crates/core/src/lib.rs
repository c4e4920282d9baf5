//! Quality-aware multi-centroid one-class learning.
//!
//! Bona fide embeddings are modeled by one learnable unit centroid per
//! quality level (levels come from thresholding MOS). Training combines a
//! multi-centroid one-class margin loss with an AM-Softmax quality
//! classification loss; inference scores an utterance by its similarity to
//! the labeled centroid, the closest centroid, or the mean over centroids.
//!
//! Modules, bottom-up: [`numerics`], [`data`], [`model`], [`losses`],
//! [`training`], [`scoring`], and the [`cli`] front end.

pub mod cli;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod presets;
pub mod scoring;
pub mod training;

pub use error::{QamoError, Result};
