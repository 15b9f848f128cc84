//! The fused image + tendon network, its ablation variants and losses.

mod config;
mod loss;
mod model;

pub use config::{NetConfig, Variant};
pub use loss::{
    mse_loss, perceptual_loss, sfe_composite_loss, ssim, ssim_loss, Perceptual, SsimConstants, PERCEPTUAL_TAPS,
};
pub use model::{encoder_blocks, DropoutKey, Forward, Normalizer, SpatialInput, StNet, TendonWindow};
