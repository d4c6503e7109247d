//! Minimal dense tensors with reverse-mode differentiation, the layers the
//! model needs, Adam and checkpointing. Everything is `f64`.

mod graph;
mod layers;
mod params;
mod tensor;

pub mod gradcheck;

pub use graph::{Graph, Var};
pub use layers::{positional_encoding, Conv1d, LayerNorm, Linear, MultiHeadAttention};
pub use params::{AdamConfig, CheckpointMeta, ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
