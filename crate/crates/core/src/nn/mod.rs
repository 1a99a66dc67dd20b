//! Dense tensor engine: the layer set of the dehazing network, reverse-mode
//! gradients over the recorded layer sequence, and Adagrad.

mod layers;
mod optim;
mod real;
mod tensor;

pub use layers::{
    activation_forward, batchnorm_forward, conv2d_forward, conv2d_transpose_forward, Activation, ActivationKind,
    BatchNorm2d, BatchNormState, Conv2d, ConvTranspose2d, Layer, LayerParams, Mode, Param, BN_EPSILON, BN_MOMENTUM,
};
pub mod gradcheck;
pub use optim::{adagrad_step, Adagrad};
pub use real::Real;
pub use tensor::Tensor4;
