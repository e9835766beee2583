//! The super-resolution network: configuration, graph, parameters and checkpoints.

mod checkpoint;
mod config;
mod graph;
mod network;
mod params;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use config::{param_count, LayerSpec, ModelConfig, OutputHead, IMAGE_CHANNELS};
pub use graph::{Graph, GraphLint, Node, Op, ValueId};
pub use network::{forward, forward_linear_head, Gradients, Network, Trace};
pub use params::{build_model, init_std, LayerParams, ModelParams, INIT_VARIANCE_SCALE};
