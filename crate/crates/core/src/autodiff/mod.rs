//! Dense tensors, a reverse-mode tape, MLPs and Adam: everything the model
//! needs to train.

mod adam;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, DEFAULT_LEARNING_RATE};
pub use params::{Dense, Mlp, OutputActivation, ParamId, ParamStore};
pub use tape::{
    bce_term, gram_schmidt_forward, sigmoid, Gradients, OpKind, Tape, Var, GS_DEGENERATE,
    PROB_CLIP,
};
pub use tensor::Tensor;
