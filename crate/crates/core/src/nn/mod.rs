//! A small trainable network engine: batched dense tensors, 3×3 same-padded
//! convolutions, ceil-mode 2×2 max pooling, dense layers, ReLU and sigmoid,
//! log-loss, Adam, He initialization and finite-difference gradient checks.
//!
//! Batched activations use a channel-major `[C, B, H, W]` layout so that a
//! whole mini-batch goes through each convolution as a single GEMM. A single
//! sample `[C, H, W]` is the `B = 1` case of that layout.

pub mod adam;
pub mod gradcheck;
pub mod init;
pub mod loss;
pub mod network;
pub mod ops;
mod real;
mod tensor;

pub use adam::{AdamConfig, AdamState, LrSchedule};
pub use gradcheck::{
    grad_check, grad_check_batched, grad_check_batched_worst, grad_check_with, kink_margin, relative_error, WorstParam,
};
pub use init::he_uniform_init;
pub use loss::{logloss, logloss_grad};
pub use network::{ForwardCache, Gradients, LayerSpec, Network};
pub use real::Real;
pub use tensor::Tensor;
