//! Minimal differentiable tensor substrate: values, parameters, reverse-mode
//! gradients, the normalised convolution layer, and checkpoint archives.

pub mod autograd;
pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod param;
pub mod tensor;

pub use autograd::{backward, no_grad, trace_shapes, Gradients, Var};
pub use gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport};
pub use kernels::ConvGeometry;
pub use layers::{Conv2d, Conv2dNorm, GroupNorm};
pub use param::{ParamBuilder, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
