//! Numeric substrate: tensors, layer primitives, backpropagation, SGD, PCA, seeded RNG.

pub mod io;
mod layers;
pub mod ops;
mod optim;
mod pca;
mod rng;
mod scalar;
mod tensor;

pub use layers::{GradTape, Grads, LayerSpec, Mode, Network};
pub use ops::{conv2d_valid, deconv2d, dropout, elu, maxpool, mse, mse_grad, unpool, Switches};
pub use optim::{sgd_step, Sgd};
pub use pca::{pca_fit, symmetric_eigen, PcaMode, PcaModel};
pub use rng::{mix_seed, Rng};
pub use scalar::{dot, norm, Scalar};
pub use tensor::Tensor;
