//! Forward ops and their gradients.

mod activation;
mod conv;
pub(crate) mod kernels;
mod loss;
mod rearrange;

pub use activation::{clip_unit, clipped_relu, clipped_relu_grad, relu, relu_grad};
pub use conv::{conv2d, conv2d_backward, conv2d_grad, ConvGrads, ConvSpec};
pub use loss::{charbonnier_loss, charbonnier_loss_grad, CHARBONNIER_EPSILON};
pub use rearrange::{concat_channels, concat_channels_grad, depth_to_space, space_to_depth};
