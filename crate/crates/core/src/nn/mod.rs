//! Dense `f32` tensors, a gradient tape, and the layers built on them.

pub mod attention;
pub mod gradcheck;
pub mod gru;
pub mod kernels;
pub mod ops;
pub mod optim;
pub mod params;
pub mod serialize;
pub mod tape;
pub mod tensor;

pub use attention::{KvCache, LayerNorm, Linear, MultiHeadAttention, TransformerBlock};
pub use gradcheck::{finite_difference_check, probe_gradients, Probe};
pub use gru::{gru_cell, Gru};
pub use optim::{adam_step, Adam};
pub use params::{Init, Param, ParamId, ParameterSet};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
