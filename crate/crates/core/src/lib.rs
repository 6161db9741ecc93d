//! Continual object detection with an adaptive residual context.
//!
//! A frozen generalist detector keeps its original classes while trainable
//! specialist heads learn new ones from bridge-enhanced features. The crate
//! contains the tensor/autodiff substrate, the context bridge, the dual-branch
//! detector, veto fusion, COCO-style evaluation, the optimizer and training
//! loops, a synthetic scene generator, and the command-line harness.

pub mod autodiff;
pub mod bridge;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod params;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Parameter};
pub use scalar::Scalar;

pub type TensorF32 = tensor::Tensor<f32>;
pub type TensorF64 = tensor::Tensor<f64>;
pub use tensor::Tensor;
