//! Sparse-CNN + transformer joint event and prong classifier for two-view
//! detector pixel maps, with the interpretability and evaluation tooling
//! around it and a synthetic event generator.
//!
//! Layout:
//! - [`tensor`]: f64 tensors and the define-by-run autodiff graph.
//! - [`sparse`]: pixel maps and the submanifold embedding CNN.
//! - [`transformer`]: the shared encoder with type embeddings.
//! - [`model`]: full network, labels, losses, optimiser and training.
//! - [`datagen`]: synthetic events and dataset files.
//! - [`interpret`]: attention/saliency analyses and evaluation metrics.
//! - [`io`]: configuration, checkpoints and analysis output files.

pub mod datagen;
pub mod error;
pub mod interpret;
pub mod io;
pub mod model;
pub mod par;
pub mod params;
pub mod sparse;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::{Graph, Tensor, Var};
