//! Multi-annotator deep learning.
//!
//! Jointly trains a ground-truth classifier and an annotator-performance
//! model from noisy, partially observed crowd annotations, with
//! kernel-density annotator weights that discount correlated annotators.

pub mod diffnet;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod io;
pub mod checkpoint;
pub mod data;
pub mod models;
pub mod simulate;
pub mod training;
pub mod weighting;

pub use error::{MadlError, Result};
