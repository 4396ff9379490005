//! Minimal reverse-mode layer library (dense, 3x3 convolution, max pooling,
//! relu, dropout, residual blocks), an rmsprop optimizer, and the two prior
//! networks that map 2D evidence to body-model parameters.

mod error;
pub mod checkpoint;
pub mod finetune;
pub mod net;
pub mod optim;
pub mod priors;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use net::{LayerSpec, Mode, Network, Tape};
pub use optim::Rmsprop;
pub use priors::{PosePrior, PriorConfig, Priors, ShapePrior};
pub use tensor::Tensor;
