//! Image files, quality metrics, LR synthesis and correlation-map
//! rendering.

mod io;
mod metrics;
mod visualize;

pub use io::{decode_image, encode_image, load_image, save_image, to_rgb8, ImageFormat};
pub use metrics::{format_psnr, make_lr, psnr, ssim, SSIM_WINDOW};
pub use visualize::{corrmap_image, corrmap_visualize};
