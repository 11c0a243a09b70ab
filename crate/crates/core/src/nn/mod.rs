//! Dense networks with reverse-mode differentiation, losses, and optimizers.

mod dense;
mod graph;
pub mod io;
mod loss;
mod optim;
mod tensor;

pub use dense::{Activation, Bound, DenseNet, Layer, Param};
pub use graph::{sigmoid, softmax_in_place, Graph, Var, LOG_FLOOR};
pub use loss::{vae_loss, weighted_cross_entropy, Reconstruction, VaeLoss};
pub use optim::{Optimizer, OptimizerKind};
pub use tensor::Tensor;
