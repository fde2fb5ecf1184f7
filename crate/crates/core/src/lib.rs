//! Fisheye surround-view images to bird's-eye-view height and segmentation
//! maps through distortion-aware spatial cross attention.
//!
//! The crate is organised bottom-up: [`camera`] and [`bev`] hold the exact
//! geometry, [`diff`] is a small reverse-mode autodiff engine, [`attention`],
//! [`encoder`] and [`heads`] build the network on top of it, [`metrics`]
//! scores predictions, [`synth`] renders a synthetic parking lot with exact
//! ground truth and [`pipeline`] ties everything into training, evaluation
//! and inference.

pub mod attention;
pub mod bev;
pub mod camera;
pub mod diff;
pub mod encoder;
pub mod error;
pub mod geom;
pub mod heads;
pub mod metrics;
pub mod nn;
pub mod pnm;
pub mod pipeline;
pub mod scalar;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Camera = camera::FisheyeCamera<f64>;
pub type Tensor32 = diff::Tensor<f32>;
pub type Tensor64 = diff::Tensor<f64>;
pub type Graph32 = diff::Graph<f32>;
pub type Graph64 = diff::Graph<f64>;
