//! Weakly supervised temporal localization and windowed grading of feature
//! sequences from a single annotated timestamp per sequence.
//!
//! The pipeline has three stages: a localization network scores every
//! frame, the window proposer turns the score curve into candidate windows
//! by fitting a two-sided Gaussian around each peak, and a grading network
//! classifies each window (with an extra background class) before a
//! consensus rule picks the sequence grade.

pub mod autodiff;
pub mod error;
mod io;
pub mod nets;
pub mod metrics;
pub mod objectives;
pub mod synth;
pub mod trainer;
pub mod wpm;

pub use error::{Error, Result};
