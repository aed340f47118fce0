//! U-shaped promptable segmentation.
//!
//! A CNN pyramid feeds both a ViT image encoder (through its coarsest level)
//! and a chain of skip-connected upsampling blocks. Point prompts are encoded
//! into query tokens which a two-way transformer decodes against the image
//! embedding; the resulting per-class mask tokens weight the upsampled source
//! feature into class logits.
//!
//! Module map:
//! - [`data`]: HU windowing, slice-pair packing, augmentation, synthetic datasets
//! - [`encoder`]: CNN feature pyramid, ViT encoder, pretrained weight import
//! - [`prompting`]: point sampling, prompt encoder, query tokens
//! - [`decoder`]: two-way transformer mask decoder, token MLPs, U-shaped upsampling
//! - [`model`]: the assembled network
//! - [`training`]: CE + Dice loss, Adam with two parameter groups, training loop
//! - [`evaluation`]: Dice/IoU, dataset evaluation, ablation grids
//! - [`checkpoint`]: safetensors checkpoints with a JSON metadata record
//! - [`rle`]: run-length encoding of class maps

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod params;
pub mod prompting;
pub mod rle;
pub mod training;

pub use config::{Architecture, BackboneConfig, BackboneVariant, ModelConfig};
pub use error::{Error, Result};
pub use model::USam;
