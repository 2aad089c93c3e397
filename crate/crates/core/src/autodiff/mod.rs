//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every forward operation as a node; [`Graph::backward`]
//! replays the tape in reverse and accumulates gradients. Model parameters
//! live outside the graph in a [`ParamStore`] and are bound into a pass with
//! [`Graph::param`]; after backward the leaf gradients are flushed back into
//! the store, where [`adam_step`] consumes them.
//!
//! The primitive catalog is exactly what the sequence models here need:
//! matrix/vector products, affine maps, elementwise activations,
//! concatenation, embedding lookup, an LSTM cell step, 1-D convolution with
//! max-pooling, dropout, softmax, softmax cross-entropy, and bilinear forms.

mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{Graph, NodeId};
pub use optim::{adam_step, clip_global_norm, AdamConfig};
pub use params::{
    init_orthogonal, init_xavier, load_params, save_params, ParamId, ParamStore,
};
pub use tensor::Tensor;
