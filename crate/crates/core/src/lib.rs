//! XLSR: an extremely lightweight, uint8-quantization-robust ×3 super-resolution
//! network, with the training loop, post-training quantization and a
//! pure-integer inference path.

pub mod container;
pub mod error;
pub mod image;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod quant;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use image::RgbImage;
pub use metrics::{EvalReport, MetricMode};
pub use model::{ModelConfig, ModelParams, Network, OutputHead};
pub use quant::{QuantParams, QuantizedModel, Requant};
pub use tensor::{DType, Real, Shape, Tensor, TensorError};
pub use train::{TrainConfig, TrainState};
