//! Core of the facial-saliency workbench: tensors and layer kernels, the
//! sequential classifier, training, guided-backpropagation saliency, human
//! annotation aggregates and their comparison.

pub mod annotation;
pub mod comparison;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod mapfile;
pub mod network;
pub mod ops;
pub mod render;
pub mod saliency;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use network::{ActivationTrace, Checkpoint, Gradients, LayerKind, LayerParams, LayerSpec, NetworkSpec};
pub use tensor::{Element, Tensor};
