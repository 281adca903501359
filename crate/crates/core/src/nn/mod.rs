//! Primitive layers: convolution, pooling, activations and normalization.

mod activation;
mod conv;
mod norm;
mod pool;

pub use activation::{dropout, relu, relu_backward, softmax_channels, DropoutSpec, Mode};
pub(crate) use conv::conv2d_f64;
pub use conv::{conv2d, conv2d_backward, conv2d_slices, ConvGrads, ConvSpec};
pub(crate) use norm::batchnorm_train_f64;
pub use norm::{
    batchnorm, batchnorm_backward, batchnorm_forward, batchnorm_train, l2norm, BatchStats, BnGrads, BnParams,
    BN_EPSILON, BN_MOMENTUM,
};
pub use pool::{maxpool2d, PoolSpec};
