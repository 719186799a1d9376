//! Cross-view semantic transformation from aerial to ground-level label maps.
//!
//! The crate is `no_std` (with `alloc`) and contains only pure computation:
//!
//! - [`tensor`] and [`graph`]: dense tensors and a reverse-mode autodiff tape.
//! - [`nn`]: trainable blocks (linear, conv, batch norm, MLP, backbone,
//!   hypercolumn sampling) and the Adam optimizer.
//! - [`model`]: the aerial feature network, the conditioning network, the
//!   per-entry transform network and the row-stochastic logit transform.
//! - [`synth`]: a procedural world that renders aligned aerial/ground label
//!   pairs with an exact geometric oracle.
//! - [`train`]: cross-view training, direct aerial finetuning and evaluation.
//! - [`geocalib`]: orientation estimation and fine-grained geocalibration.
//! - [`viz`]: deterministic rasterization into PPM images.
//!
//! File formats, dataset IO and the command-line front-end live in the
//! companion `crossview` crate.

#![no_std]

extern crate alloc;

pub mod error;
pub mod geocalib;
pub mod gradcheck;
pub mod graph;
pub mod labels;
mod linalg;
pub mod model;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod viz;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use labels::LabelMap;
pub use model::{CrossViewConfig, CrossViewModel, TransformKind};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
