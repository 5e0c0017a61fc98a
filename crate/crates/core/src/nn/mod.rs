//! Tensor arithmetic with reverse-mode differentiation, the layer set used by
//! the encoders/decoders, Adam, MAC counting and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod macs;
pub mod optim;
pub mod params;

pub use graph::{CustomOp, Gradients, Graph, Var};
pub use macs::{count_macs, LayerSpec, MacCount};
pub use optim::{AdamConfig, OptimState};
pub use params::{LayerParam, ParamId, ParamStore};
