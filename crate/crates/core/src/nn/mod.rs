//! Minimal dense-network substrate: parameter tensors, MLPs with exact
//! reverse-mode gradients, masked softmax, and an Adam optimizer with
//! learning-rate annealing and decoupled weight decay.

mod adam;
mod mlp;
mod tensor;

pub use adam::{clip_grad_norm, Adam, AdamConfig};
pub use mlp::{
    masked_log_softmax, masked_softmax, sigmoid, Activation, Dense, Mlp, MlpCache, MlpSpec,
    OutputActivation,
};
pub use tensor::ParamTensor;
