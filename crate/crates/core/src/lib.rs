//! Episodic prototypical few-shot classification.
//!
//! The crate is organised bottom-up: [`tensor`] is a small reverse-mode
//! autodiff engine, [`encoder`] builds embedding networks on it, [`head`]
//! turns embeddings into prototype distances and losses, [`train`] runs the
//! episodic optimisation loop, [`eval`] aggregates confusion matrices and
//! reports, and [`explain`] produces Grad-CAM saliency maps. [`data`] covers
//! manifests, splitting, augmentation and episode sampling.

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod eval;
pub mod explain;
pub mod head;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use tensor::{Graph, Scalar, Tensor, TensorError, Var};
