//! Mask decoder: two-way transformer over query tokens and the image
//! embedding, per-class token MLPs, and the upsampling head that turns the
//! source feature into full-scale class logits.

mod mask_decoder;
mod transformer;
mod upsample;

pub use mask_decoder::{DecodedTokens, MaskDecoder};
pub use transformer::TwoWayTransformer;
pub use upsample::{combine, predict_mask, skip_config, SkipConfig, TwoStepHead, UNetHead, UpBlock};
