use super::layer::Gradients;
use super::tensor::{Scalar, Tensor};
use super::weights::ModelWeights;
use crate::error::{Error, Result};

/// Velocity buffers for momentum SGD, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState<T = f32> {
    pub velocity: Vec<(String, Tensor<T>)>,
}

/// `v <- momentum * v + g; w <- w - lr * v` for every gradient entry.
pub fn sgd_step<T: Scalar>(
    weights: &mut ModelWeights<T>,
    grads: &Gradients<T>,
    learning_rate: T,
    momentum: T,
    state: &mut SgdState<T>,
) -> Result<()> {
    for (name, g) in grads {
        if weights.is_frozen(name)? {
            return Err(Error::State(format!(
                "gradient supplied for frozen tensor '{name}'"
            )));
        }
        if weights.tensor(name)?.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient '{name}' has shape {:?}",
                g.shape()
            )));
        }
    }
    for (name, g) in grads {
        let slot = match state.velocity.iter().position(|(n, _)| n == name) {
            Some(i) => i,
            None => {
                state
                    .velocity
                    .push((name.clone(), Tensor::zeros(g.shape())));
                state.velocity.len() - 1
            }
        };
        let v = &mut state.velocity[slot].1;
        let w = weights.tensor_mut(name)?;
        for ((vi, &gi), wi) in v.data_mut().iter_mut().zip(g.data()).zip(w.data_mut()) {
            *vi = momentum * *vi + gi;
            *wi -= learning_rate * *vi;
        }
    }
    Ok(())
}
