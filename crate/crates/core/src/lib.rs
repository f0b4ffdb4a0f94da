//! Invertible flow models for joint image super-resolution and downscaling.
//!
//! The crate holds the numerical core: tensors, a reverse-mode gradient tape,
//! invertible layers, priors, the two bidirectional flow models, training
//! objectives, resampling operators and image-quality metrics.

pub mod ds_flow;
pub mod error;
pub mod graph;
pub mod imaging;
pub mod layers;
pub mod linalg;
pub mod model;
pub mod metrics;
pub mod nets;
pub mod objectives;
pub mod oracle;
pub mod params;
pub mod priors;
pub mod real;
pub mod sr_flow;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use model::{ModelConfig, SdFlow};
pub use graph::{Gradients, Graph, NodeId};
pub use params::{ParamBuilder, ParamGroup, ParamId, ParamStore};
pub use real::{DType, Real};
pub use tensor::{Shape, Tensor};
