//! Reverse-mode gradients over the small layer set used by the supernet:
//! convolution, dense, pointwise activations, batch normalization,
//! residual add, pooling and channel plumbing.
//!
//! Weights live in a [`ParamStore`]. Each parameter carries a `frozen` flag;
//! frozen parameters never receive gradients, which is how the supernet
//! trains only its BN indicators and how retraining trains everything.

pub mod checkpoint;
mod jacobian;
pub mod kernels;
mod layers;
mod loss;
mod optim;
mod params;
mod tape;

pub use checkpoint::Checkpoint;
pub use jacobian::{jacobian_of, DENSE_JACOBIAN_LIMIT};
pub use layers::{Activation, BatchNorm, Conv2d, Dense, Layer};
pub use loss::{argmax_rows, softmax_cross_entropy};
pub use optim::{cosine_lr, Sgd, SgdConfig};
pub use params::{
    BnId, BnParams, BnState, Gradients, Param, ParamId, ParamRole, ParamStore, BN_EPS,
    BN_MOMENTUM,
};
pub use tape::{backward_bn_only, forward_block, Mode, Tape, Var};
