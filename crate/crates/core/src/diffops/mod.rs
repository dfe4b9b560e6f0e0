//! Structural differentiable operators of the network.

mod bicubic;
mod conv;
mod deform;
mod init;
mod sample;
mod shuffle;
mod warp;

pub use bicubic::{bicubic_resize, bicubic_resize_vjp, cubic_kernel, Scale};
pub use conv::{conv2d, conv2d_vjp, residual_block, residual_block_vjp, Conv2dGrads, Conv2dParams, ResidualGrads};
pub use deform::{
    broadcast_flow_to_offsets, deformable_conv, deformable_conv_vjp, reduce_offsets_to_flow, DeformConvGrads,
};
pub use init::{fan_in_uniform, icnr_init};
pub use shuffle::{pixel_shuffle, pixel_shuffle_vjp, space_to_depth, space_to_depth_vjp};
pub use warp::{bilinear_warp, bilinear_warp_vjp, WarpGrads};
