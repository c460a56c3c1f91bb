//! Graph-capsule U-Net for retinal vessel segmentation.
//!
//! The crate is self-contained: a small f64 tensor type with reverse-mode
//! differentiation, graph and capsule layers, the fusion blocks, the
//! segmentation network, dataset loading, training and evaluation.

pub mod autodiff;
pub mod capsule;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod morphology;
pub mod network;
pub mod nn;
pub mod par;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
