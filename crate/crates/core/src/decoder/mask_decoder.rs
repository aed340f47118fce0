use candle::{Module, Tensor};
use candle_nn::{Linear, VarBuilder};

use super::transformer::TwoWayTransformer;
use super::upsample::{combine, skip_config, TwoStepHead, UNetHead};
use crate::config::{Architecture, ModelConfig};
use crate::encoder::FeaturePyramid;
use crate::nn;
use crate::prompting::build_queries;
use crate::{Error, Result};

/// Three-layer ReLU MLP, D -> D -> D/8.
#[derive(Debug, Clone)]
struct TokenMlp {
    layers: [Linear; 3],
}

impl TokenMlp {
    fn new(d: usize, vb: VarBuilder) -> candle::Result<Self> {
        Ok(Self {
            layers: [
                nn::linear(d, d, true, vb.pp("layers.0"))?,
                nn::linear(d, d, true, vb.pp("layers.1"))?,
                nn::linear(d, d / 8, true, vb.pp("layers.2"))?,
            ],
        })
    }
}

impl Module for TokenMlp {
    fn forward(&self, xs: &Tensor) -> candle::Result<Tensor> {
        let xs = self.layers[0].forward(xs)?.relu()?;
        let xs = self.layers[1].forward(&xs)?.relu()?;
        self.layers[2].forward(&xs)
    }
}

#[derive(Debug, Clone)]
enum Head {
    UNet(Box<UNetHead>),
    TwoStep(TwoStepHead),
}

/// Output of the two-way transformer for one image.
#[derive(Debug, Clone)]
pub struct DecodedTokens {
    /// (1, D, h, w)
    pub source: Tensor,
    /// (N, D)
    pub mask_tokens: Tensor,
}

#[derive(Debug, Clone)]
pub struct MaskDecoder {
    transformer: TwoWayTransformer,
    mask_tokens: Tensor,
    token_mlps: Vec<TokenMlp>,
    head: Head,
    num_classes: usize,
    dim: usize,
}

impl MaskDecoder {
    pub fn new(cfg: &ModelConfig, vb: VarBuilder) -> Result<Self> {
        let d = cfg.latent_dim();
        let n = cfg.num_classes;
        let transformer = TwoWayTransformer::new(
            cfg.decoder_depth,
            d,
            cfg.decoder_heads,
            cfg.decoder_mlp_dim,
            vb.pp("transformer"),
        )?;
        let mask_tokens = vb.get_with_hints(
            (n, d),
            "mask_tokens.weight",
            candle_nn::Init::Randn { mean: 0.0, stdev: 1.0 },
        )?;
        let token_mlps = (0..n)
            .map(|i| TokenMlp::new(d, vb.pp(format!("output_hypernetworks_mlps.{i}"))))
            .collect::<candle::Result<Vec<_>>>()?;
        let head = match cfg.architecture {
            Architecture::USam => Head::UNet(Box::new(UNetHead::new(d, n, skip_config(cfg.skips)?, vb.clone())?)),
            Architecture::TwoStep => Head::TwoStep(TwoStepHead::new(d, vb.pp("output_upscaling"))?),
        };
        Ok(Self {
            transformer,
            mask_tokens,
            token_mlps,
            head,
            num_classes: n,
            dim: d,
        })
    }

    pub fn mask_tokens(&self) -> &Tensor {
        &self.mask_tokens
    }

    /// Run the two-way transformer for one image.
    ///
    /// `emb` is (1, D, h, w), `image_pe` is (D, h, w) and `prompt_embeddings`
    /// is (K, D) with K >= 1 (the no-prompt row stands in for an empty set).
    pub fn mask_decode(&self, emb: &Tensor, image_pe: &Tensor, prompt_embeddings: &Tensor) -> Result<DecodedTokens> {
        let (b, c, h, w) = emb.dims4()?;
        if b != 1 || c != self.dim {
            return Err(Error::Shape(format!(
                "image embedding {:?} does not match decoder width {}",
                emb.dims(),
                self.dim
            )));
        }
        if image_pe.dims() != [c, h, w] {
            return Err(Error::Shape(format!(
                "positional encoding {:?} does not match embedding {:?}",
                image_pe.dims(),
                emb.dims()
            )));
        }
        let queries = build_queries(prompt_embeddings, &self.mask_tokens)?.unsqueeze(0)?;
        let (hs, src) = self.transformer.forward(emb, &image_pe.unsqueeze(0)?, &queries)?;
        Ok(DecodedTokens {
            source: src.transpose(1, 2)?.reshape((1, c, h, w))?,
            mask_tokens: hs.narrow(1, 0, self.num_classes)?.squeeze(0)?,
        })
    }

    /// Row i through MLP i: (N, D) to (N, D/8).
    pub fn project_tokens(&self, mt: &Tensor) -> Result<Tensor> {
        let (n, _) = mt.dims2()?;
        if n != self.num_classes {
            return Err(Error::Shape(format!("{n} mask tokens for {} classes", self.num_classes)));
        }
        let rows = self
            .token_mlps
            .iter()
            .enumerate()
            .map(|(i, mlp)| mlp.forward(&mt.narrow(0, i, 1)?))
            .collect::<candle::Result<Vec<_>>>()?;
        Ok(Tensor::cat(&rows, 0)?)
    }

    /// Full-scale logits (B, N, H, W) for a batch of embeddings and per-image
    /// prompt embeddings. `pyramid` is required by the U-shaped head.
    pub fn forward(
        &self,
        embs: &Tensor,
        image_pe: &Tensor,
        prompts: &[Tensor],
        pyramid: Option<&FeaturePyramid>,
    ) -> Result<Tensor> {
        let b = embs.dim(0)?;
        if prompts.len() != b {
            return Err(Error::Shape(format!("{} prompt sets for a batch of {b}", prompts.len())));
        }
        let mut sources = Vec::with_capacity(b);
        let mut tokens = Vec::with_capacity(b);
        for (i, pe) in prompts.iter().enumerate() {
            let out = self.mask_decode(&embs.narrow(0, i, 1)?, image_pe, pe)?;
            sources.push(out.source);
            tokens.push(self.project_tokens(&out.mask_tokens)?.unsqueeze(0)?);
        }
        let src = Tensor::cat(&sources, 0)?;
        let tokens = Tensor::cat(&tokens, 0)?;
        match &self.head {
            Head::UNet(head) => {
                let pyr = pyramid.ok_or_else(|| Error::Shape("U-shaped head needs the feature pyramid".into()))?;
                let src = head.upsample_source(&src, pyr)?;
                let l_half = combine(&tokens, &src)?;
                head.restore_full(&l_half, &pyr.f0)
            }
            Head::TwoStep(head) => {
                let src = head.forward(&src)?;
                TwoStepHead::to_full(&combine(&tokens, &src)?)
            }
        }
    }
}
