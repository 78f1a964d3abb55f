//! Curriculum-scheduled image–caption contrastive pretraining over object
//! features.
//!
//! Images are sets of object feature vectors, captions are token sequences.
//! Training aligns the two through attention-weighted dot products and an
//! in-batch contrastive loss, optionally ordered into phases by how many
//! concepts each caption names and damped by what a prior model has already
//! aligned. Evaluation is zero-shot object classification against concept
//! token embeddings.

pub mod alignment;
pub mod curriculum;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
