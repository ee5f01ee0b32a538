//! Desk-scale toolkit for cross-domain feature augmentation: a small
//! reverse-mode autodiff tape, MLP extractor/head models, gradient-based
//! feature decomposition and mixing, baseline feature perturbations,
//! synthetic multi-domain datasets, and distribution-shift metrics.

pub mod augmentation;
pub mod data;
pub mod decomposition;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
