//! A small single-sample network engine: 3x3 convolutions, linear layers,
//! activations, inverted dropout and global average pooling, with
//! hand-written backward passes, SGD and a finite-difference checker.

pub mod gradcheck;
pub mod loss;
pub mod network;
pub mod ops;
pub mod optim;

pub use gradcheck::{grad_check, GradCheckReport, GradLoss};
pub use loss::{cross_entropy, smooth_l1, smooth_l1_grad, softmax};
pub use network::{Act, DropoutMode, LayerSpec, Network, Param, Tape};
pub use ops::Chw;
pub use optim::{sgd_step, OptimState};
