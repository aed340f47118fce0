use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneVariant {
    #[serde(rename = "vit-b-full")]
    VitBFull,
    #[serde(rename = "tiny")]
    Tiny,
}

impl std::fmt::Display for BackboneVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackboneVariant::VitBFull => f.write_str("vit-b-full"),
            BackboneVariant::Tiny => f.write_str("tiny"),
        }
    }
}

/// Transformer backbone hyper-parameters.
///
/// The token width `embed_dim` is also the channel count of the coarsest CNN
/// level, and the decoder latent width is `embed_dim / 3`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    /// Window edge for windowed attention blocks; 0 makes every block global.
    pub window_size: usize,
    pub global_attn_indexes: Vec<usize>,
    pub use_rel_pos: bool,
    /// Side of the stored absolute positional grid, resized to the token grid
    /// at run time.
    pub pos_grid: usize,
}

impl BackboneConfig {
    pub fn vit_b() -> Self {
        Self {
            variant: BackboneVariant::VitBFull,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_dim: 3072,
            window_size: 14,
            global_attn_indexes: vec![2, 5, 8, 11],
            use_rel_pos: true,
            pos_grid: 64,
        }
    }

    pub fn tiny() -> Self {
        Self {
            variant: BackboneVariant::Tiny,
            embed_dim: 192,
            depth: 2,
            heads: 4,
            mlp_dim: 768,
            window_size: 4,
            global_attn_indexes: vec![1],
            use_rel_pos: true,
            pos_grid: 4,
        }
    }

    /// Decoder latent dimension D.
    pub fn latent_dim(&self) -> usize {
        self.embed_dim / 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("backbone depth must be at least 1".into()));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        // embed_dim = 3D and D/8 must be whole
        if !self.embed_dim.is_multiple_of(24) {
            return Err(Error::Config(format!(
                "embed_dim {} must be a multiple of 24",
                self.embed_dim
            )));
        }
        if let Some(i) = self.global_attn_indexes.iter().find(|&&i| i >= self.depth) {
            return Err(Error::Config(format!(
                "global attention index {i} exceeds depth {}",
                self.depth
            )));
        }
        if self.pos_grid == 0 {
            return Err(Error::Config("pos_grid must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Skip-connected U-shaped decoder ending in a learned full-scale block.
    #[serde(rename = "usam")]
    USam,
    /// Learned 4x upsampling of the source feature, then 4x bilinear on logits.
    TwoStep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Class count N, background included.
    pub num_classes: usize,
    /// Number of enabled skip connections, innermost first.
    pub skips: u8,
    pub architecture: Architecture,
    pub decoder_heads: usize,
    pub decoder_mlp_dim: usize,
    pub decoder_depth: usize,
}

impl ModelConfig {
    pub fn vit_b(num_classes: usize) -> Self {
        Self {
            backbone: BackboneConfig::vit_b(),
            num_classes,
            skips: 4,
            architecture: Architecture::USam,
            decoder_heads: 8,
            decoder_mlp_dim: 2048,
            decoder_depth: 2,
        }
    }

    pub fn tiny(num_classes: usize) -> Self {
        Self {
            backbone: BackboneConfig::tiny(),
            num_classes,
            skips: 4,
            architecture: Architecture::USam,
            decoder_heads: 4,
            decoder_mlp_dim: 256,
            decoder_depth: 2,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.backbone.latent_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must include background and one class".into()));
        }
        if self.num_classes > 255 {
            return Err(Error::Config("at most 255 classes fit an 8-bit label map".into()));
        }
        if self.skips > 4 {
            return Err(Error::Config(format!("skips must be in 0..=4, got {}", self.skips)));
        }
        let d = self.latent_dim();
        // attention runs at half width inside the cross-attention layers
        if self.decoder_heads == 0 || !d.is_multiple_of(self.decoder_heads) || !(d / 2).is_multiple_of(self.decoder_heads) {
            return Err(Error::Config(format!(
                "decoder width {d} is not divisible by decoder_heads {}",
                self.decoder_heads
            )));
        }
        if self.decoder_depth == 0 {
            return Err(Error::Config("decoder_depth must be at least 1".into()));
        }
        Ok(())
    }

    /// Short human-readable identity used in logs, reports and the service.
    pub fn tag(&self) -> String {
        let arch = match self.architecture {
            Architecture::USam => "usam",
            Architecture::TwoStep => "twostep",
        };
        format!(
            "{}-{arch}-n{}-skips{}",
            self.backbone.variant, self.num_classes, self.skips
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::vit_b(3).validate().unwrap();
        ModelConfig::tiny(3).validate().unwrap();
        assert_eq!(BackboneConfig::vit_b().latent_dim(), 256);
        assert_eq!(BackboneConfig::tiny().latent_dim(), 64);
    }

    #[test]
    fn rejects_bad_backbones() {
        let mut b = BackboneConfig::tiny();
        b.heads = 5;
        assert!(b.validate().is_err());
        let mut b = BackboneConfig::tiny();
        b.depth = 0;
        assert!(b.validate().is_err());
        let mut m = ModelConfig::tiny(3);
        m.skips = 5;
        assert!(m.validate().is_err());
    }
}
