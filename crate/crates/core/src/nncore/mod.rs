//! Dense tensors, a reverse-mode tape, the layer primitives the backbone
//! needs, and AdamW with a cosine schedule.

pub mod graph;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use graph::{gelu_scalar, Gradients, Graph, NodeId};
pub use layers::{layer_norm, linear, multi_head_attention, softmax, softmax_cross_entropy};
pub use optim::{cosine_lr, AdamW, OptimState};
pub use tensor::{Param, ParamStore, Scalar, Tensor};
