//! Query-based keypoint regression.
//!
//! A small convolutional backbone produces a feature pyramid and a coarse
//! keypoint proposal. Each keypoint becomes a query that a transformer decoder
//! refines with sampled deformable attention into the pyramid. Training
//! maximises a flow-based residual likelihood; inference scores each keypoint
//! by the Laplace mass around its prediction.

pub mod backbone;
pub mod bench;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod likelihood;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{Graph, NdArray, Tensor};
