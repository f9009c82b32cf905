//! A small CPU neural-network engine: NCHW tensors, the layer set needed by
//! VGG-style feature branches and dense classification heads, cross-entropy
//! backpropagation, momentum SGD, and a binary weights format.
//!
//! Everything is generic over [`Scalar`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

mod kernels;
mod layer;
mod optim;
mod tensor;
mod weights;

pub use layer::{
    cross_entropy, cross_entropy_grad, Activations, Gradients, LayerSpec, Mode, Sequential,
};
pub use optim::{sgd_step, SgdState};
pub use tensor::{Scalar, Tensor};
pub use weights::{
    decode_weights, encode_weights, init_weights, load_weights, save_weights, ModelWeights, Param,
};

#[cfg(test)]
mod tests;
