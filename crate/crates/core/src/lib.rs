//! Core library for an expert-routed multimodal dialog model: a small
//! reverse-mode autodiff engine, the vision frontend, the routed expert
//! stack, stage losses, a toy encoder-decoder generator, synthetic data,
//! evaluation metrics, and the three-stage training pipeline.

pub mod error;
pub mod eval;
pub mod experts;
pub mod gradcheck;
pub mod model;
pub mod data;
pub mod generator;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod vision;

pub use error::{Error, Result};
pub use tensor::{Element, Mask, Tensor};
