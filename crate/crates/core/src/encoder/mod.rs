//! Image encoder: a four-stage CNN pyramid whose coarsest level is tokenized
//! and run through ViT blocks plus a projection neck.

mod cnn;
mod pretrained;
mod vit;

pub use cnn::{CnnPyramid, FeaturePyramid};
pub use pretrained::{load_pretrained, load_pretrained_tensors, LoadReport};
pub use vit::VitEncoder;
