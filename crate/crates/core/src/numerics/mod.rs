//! Dense tensors, numeric kernels and reverse-mode differentiation.

mod autograd;
mod gradcheck;
mod kernels;
mod ssim;
mod tensor;

pub use autograd::{Gradients, Graph, Var};
pub use gradcheck::{grad_check, grad_check_sampled, relative_error, GradCheckReport, GRAD_CHECK_STEP};
pub use kernels::{channel_norm, conv2d, kron, kron_matvec, matmul, softmax_lastdim};
pub use ssim::{ssim, SSIM_C1, SSIM_C2, SSIM_WINDOW};
pub use tensor::Tensor;
