//! Deep one-class feature learning on a compact CNN.
//!
//! Train a feature extractor on a single target class plus an unrelated
//! multi-class reference set, balancing a descriptiveness loss
//! (cross-entropy on the reference classes) against a compactness loss
//! (batch variance of the target features). Classify at test time by
//! Euclidean template matching in the learned feature space, and evaluate
//! with ROC/AUC/EER.
//!
//! See the `examples/` directory for one runnable walkthrough per
//! capability, and the `oneclass` binary for the scriptable front end.

pub mod data;
pub mod error;
pub mod format;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
