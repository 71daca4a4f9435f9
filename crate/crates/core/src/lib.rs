//! Real-time object detection with a truncated MobileNetV2 backbone, raw
//! feature collection and redistribution across scales, a PANet-lite neck
//! and a YOLO head. Pure-CPU float32 kernels with a small reverse-mode
//! autodiff tape for desk-scale training.

pub mod app;
pub mod autograd;
pub mod backbone;
pub mod bench;
pub mod blocks;
pub mod config;
pub mod data;
pub mod context;
pub mod error;
pub mod eval;
pub mod flops;
pub mod geometry;
pub mod head;
pub mod init;
pub mod kernels;
pub mod model;
pub mod rfcr;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape, Tensor};
pub use weights::WeightStore;
