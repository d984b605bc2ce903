//! Small dense-network toolkit with hand-written reverse-mode gradients.

mod adam;
mod gru;
mod layers;
pub mod neighbors;
mod tensors;

pub use adam::Adam;
pub use gru::{gru_backward, gru_forward, GruCache};
pub use layers::{
    dense, dense_backward, leaky_relu, leaky_relu_grad, mlp_backward, mlp_forward, sigmoid,
    Activation, MlpCache, LEAKY_SLOPE,
};
pub use tensors::TensorMap;
