//! Dense tensors, parameter sets, losses, optimizers and the finite-difference oracle.

mod activation;
mod dual;
mod gradcheck;
mod loss;
mod optim;
mod params;
mod scalar;
pub mod tensor;

pub use activation::Activation;
pub use dual::Dual;
pub use gradcheck::{finite_diff_grad, GradReport, PathDiff};
pub use loss::softmax_cross_entropy;
#[cfg(test)]
pub(crate) use loss::softmax_cross_entropy_slice as loss_slice;
pub use optim::Adam;
pub use params::{Checkpoint, CheckpointEntry, ParamSet, CHECKPOINT_FORMAT};
pub use scalar::Scalar;
pub use tensor::Tensor;
