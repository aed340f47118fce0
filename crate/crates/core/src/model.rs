//! The assembled network.

use candle::{DType, Device, Tensor};
use ndarray::{Array2, ArrayView2};

use crate::config::ModelConfig;
use crate::decoder::{predict_mask, MaskDecoder};
use crate::encoder::{CnnPyramid, FeaturePyramid, VitEncoder};
use crate::params::ParamStore;
use crate::prompting::{PromptEncoder, PromptSet};
use crate::{Error, Result};

pub const IMAGE_ENCODER: &str = "image_encoder";
pub const PROMPT_ENCODER: &str = "prompt_encoder";
pub const MASK_DECODER: &str = "mask_decoder";

pub struct USam {
    cfg: ModelConfig,
    store: ParamStore,
    device: Device,
    dtype: DType,
    cnn: CnnPyramid,
    vit: VitEncoder,
    prompt: PromptEncoder,
    decoder: MaskDecoder,
}

impl std::fmt::Debug for USam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("USam")
            .field("config", &self.cfg.tag())
            .field("params", &self.store.param_count())
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl USam {
    /// Fresh parameters drawn from a generator seeded with `seed`.
    pub fn new(cfg: ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(seed);
        let vb = store.var_builder(dtype, device);
        let d = cfg.latent_dim();
        let enc = vb.pp(IMAGE_ENCODER);
        let cnn = CnnPyramid::new(d, enc.pp("cnn"))?;
        let vit = VitEncoder::new(&cfg.backbone, enc)?;
        let prompt = PromptEncoder::new(d, cfg.num_classes, vb.pp(PROMPT_ENCODER))?;
        let decoder = MaskDecoder::new(&cfg, vb.pp(MASK_DECODER))?;
        Ok(Self {
            cfg,
            store,
            device: device.clone(),
            dtype,
            cnn,
            vit,
            prompt,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn prompt_encoder(&self) -> &PromptEncoder {
        &self.prompt
    }

    pub fn mask_decoder(&self) -> &MaskDecoder {
        &self.decoder
    }

    pub fn vit(&self) -> &VitEncoder {
        &self.vit
    }

    /// Stack single-channel images into a (B, 3, H, W) tensor, replicating
    /// the channel.
    pub fn image_tensor(&self, images: &[ArrayView2<f32>]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::Shape("empty image batch".into()))?;
        let (h, w) = first.dim();
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            if img.dim() != (h, w) {
                return Err(Error::Shape(format!("batch mixes {:?} and {:?} images", (h, w), img.dim())));
            }
            data.extend(img.iter().copied());
        }
        let t = Tensor::from_vec(data, (images.len(), 1, h, w), &self.device)?.to_dtype(self.dtype)?;
        Ok(t.repeat((1, 3, 1, 1))?)
    }

    pub fn pyramid(&self, images: &Tensor) -> Result<FeaturePyramid> {
        self.cnn.forward(images)
    }

    /// Logits (B, N, H, W) for images (B, 3, H, W) and one prompt set each.
    pub fn forward(&self, images: &Tensor, prompts: &[PromptSet]) -> Result<Tensor> {
        let pyr = self.cnn.forward(images)?;
        self.forward_with_pyramid(&pyr, prompts)
    }

    /// Everything downstream of the CNN pyramid.
    pub fn forward_with_pyramid(&self, pyr: &FeaturePyramid, prompts: &[PromptSet]) -> Result<Tensor> {
        let (b, _, h, w) = pyr.f0.dims4()?;
        if prompts.len() != b {
            return Err(Error::Shape(format!("{} prompt sets for a batch of {b}", prompts.len())));
        }
        let emb = self.vit.forward(&pyr.f4)?;
        let (_, _, eh, ew) = emb.dims4()?;
        let image_pe = self.prompt.dense_pe(eh, ew)?;
        let sparse = prompts
            .iter()
            .map(|p| self.prompt.encode(p, (h, w)))
            .collect::<Result<Vec<_>>>()?;
        self.decoder.forward(&emb, &image_pe, &sparse, Some(pyr))
    }

    /// Argmax class maps, one per image.
    pub fn predict(&self, images: &Tensor, prompts: &[PromptSet]) -> Result<Vec<Array2<u8>>> {
        let logits = self.forward(images, prompts)?;
        (0..logits.dim(0)?)
            .map(|i| predict_mask(&logits.get(i)?))
            .collect()
    }

    /// Names of the parameters updated by training: everything except the
    /// prompt encoder.
    pub fn trainable_names(&self) -> Vec<String> {
        self.store
            .names()
            .into_iter()
            .filter(|n| !n.starts_with(PROMPT_ENCODER))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Architecture;
    use crate::prompting::PromptPoint;

    fn prompts(k: usize, size: usize) -> PromptSet {
        PromptSet {
            points: (0..k)
                .map(|i| PromptPoint {
                    x: (i * 7) % size,
                    y: (i * 5) % size,
                    class_id: 1 + (i % 2) as u8,
                })
                .collect(),
        }
    }

    #[test]
    fn forward_shapes_tiny() {
        let model = USam::new(ModelConfig::tiny(3), 0, DType::F32, &Device::Cpu).unwrap();
        let images = Tensor::rand(0f32, 1.0, (2, 3, 32, 32), &Device::Cpu).unwrap();
        let logits = model.forward(&images, &[prompts(0, 32), prompts(6, 32)]).unwrap();
        assert_eq!(logits.dims(), &[2, 3, 32, 32]);
        let masks = model.predict(&images, &[prompts(1, 32), prompts(0, 32)]).unwrap();
        assert!(masks.iter().all(|m| m.dim() == (32, 32) && m.iter().all(|&v| v < 3)));
    }

    #[test]
    fn two_step_differs_from_unet() {
        let images = Tensor::rand(0f32, 1.0, (1, 3, 32, 32), &Device::Cpu).unwrap();
        let a = USam::new(ModelConfig::tiny(3), 0, DType::F32, &Device::Cpu).unwrap();
        let mut cfg = ModelConfig::tiny(3);
        cfg.architecture = Architecture::TwoStep;
        let b = USam::new(cfg, 0, DType::F32, &Device::Cpu).unwrap();
        let la = a.forward(&images, &[prompts(2, 32)]).unwrap();
        let lb = b.forward(&images, &[prompts(2, 32)]).unwrap();
        assert_eq!(la.dims(), lb.dims());
        let diff = (la - lb).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(diff > 1e-4);
    }

    #[test]
    fn trainable_excludes_prompt_encoder() {
        let model = USam::new(ModelConfig::tiny(3), 0, DType::F32, &Device::Cpu).unwrap();
        let names = model.trainable_names();
        assert!(names.iter().all(|n| !n.starts_with("prompt_encoder")));
        assert_eq!(names.len() + 4, model.params().len());
    }

    #[test]
    fn image_tensor_replicates_channel() {
        let model = USam::new(ModelConfig::tiny(3), 0, DType::F32, &Device::Cpu).unwrap();
        let img = Array2::from_shape_fn((32, 32), |(y, x)| (y * 32 + x) as f32 / 1024.0);
        let t = model.image_tensor(&[img.view()]).unwrap();
        assert_eq!(t.dims(), &[1, 3, 32, 32]);
        let c0 = t.get(0).unwrap().get(0).unwrap().to_vec2::<f32>().unwrap();
        let c2 = t.get(0).unwrap().get(2).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(c0, c2);
    }

    #[test]
    fn deterministic_for_seed() {
        let images = Tensor::rand(0f32, 1.0, (1, 3, 32, 32), &Device::Cpu).unwrap();
        let a = USam::new(ModelConfig::tiny(3), 11, DType::F32, &Device::Cpu).unwrap();
        let b = USam::new(ModelConfig::tiny(3), 11, DType::F32, &Device::Cpu).unwrap();
        let pa = a.predict(&images, &[prompts(3, 32)]).unwrap();
        let pb = b.predict(&images, &[prompts(3, 32)]).unwrap();
        assert_eq!(pa, pb);
        let la = a.forward(&images, &[prompts(3, 32)]).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let lb = b.forward(&images, &[prompts(3, 32)]).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(la, lb);
    }
}
