//! Point prompts: ground-truth sampling, Fourier encoding and query assembly.

use std::f64::consts::TAU;

use candle::{Module, Tensor};
use candle_nn::VarBuilder;
use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A labelled click in pixel coordinates of the model input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptPoint {
    pub x: usize,
    pub y: usize,
    pub class_id: u8,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptSet {
    pub points: Vec<PromptPoint>,
}

impl PromptSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Bounds and class checks; background prompts are not allowed.
    pub fn validate(&self, height: usize, width: usize, num_classes: usize) -> Result<()> {
        for (index, p) in self.points.iter().enumerate() {
            if p.x >= width || p.y >= height {
                return Err(Error::PointOutOfBounds {
                    index,
                    x: p.x,
                    y: p.y,
                    width,
                    height,
                });
            }
            if p.class_id == 0 || p.class_id as usize >= num_classes {
                return Err(Error::Prompt(format!(
                    "point {index} has class {} outside 1..{num_classes}",
                    p.class_id
                )));
            }
        }
        Ok(())
    }

    /// Rescale points from an `src` sized image to a `dst` sized one, mapping
    /// pixel centers.
    pub fn rescaled(&self, src: (usize, usize), dst: (usize, usize)) -> PromptSet {
        let map = |v: usize, from: usize, to: usize| {
            ((((v as f64 + 0.5) * to as f64 / from as f64) - 0.5).round().max(0.0) as usize).min(to - 1)
        };
        PromptSet {
            points: self
                .points
                .iter()
                .map(|p| PromptPoint {
                    x: map(p.x, src.1, dst.1),
                    y: map(p.y, src.0, dst.0),
                    class_id: p.class_id,
                })
                .collect(),
        }
    }
}

/// Draw up to `k_per_class` distinct pixels from every foreground class that
/// is present in `label`. Classes are visited in increasing id order.
pub fn sample_points<R: Rng + ?Sized>(
    label: &Array2<u8>,
    k_per_class: usize,
    num_classes: usize,
    rng: &mut R,
) -> PromptSet {
    let mut points = Vec::new();
    if k_per_class == 0 {
        return PromptSet { points };
    }
    let mut by_class: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_classes];
    for ((y, x), &c) in label.indexed_iter() {
        if c != 0 && (c as usize) < num_classes {
            by_class[c as usize].push((y, x));
        }
    }
    for (class, pixels) in by_class.iter().enumerate().skip(1) {
        if pixels.is_empty() {
            continue;
        }
        let k = k_per_class.min(pixels.len());
        for i in sample(rng, pixels.len(), k) {
            let (y, x) = pixels[i];
            points.push(PromptPoint {
                x,
                y,
                class_id: class as u8,
            });
        }
    }
    PromptSet { points }
}

/// Frozen prompt encoder: random Fourier features of normalized coordinates
/// plus a learned per-class embedding.
#[derive(Debug, Clone)]
pub struct PromptEncoder {
    gaussian: Tensor,
    not_a_point: Tensor,
    class_embed: Vec<Tensor>,
    dim: usize,
}

impl PromptEncoder {
    pub fn new(dim: usize, num_classes: usize, vb: VarBuilder) -> candle::Result<Self> {
        let randn = candle_nn::Init::Randn {
            mean: 0.0,
            stdev: 1.0,
        };
        let gaussian = vb.get_with_hints(
            (2, dim / 2),
            "pe_layer.positional_encoding_gaussian_matrix",
            randn,
        )?;
        let not_a_point = vb.get_with_hints((1, dim), "not_a_point_embed.weight", randn)?;
        let class_embed = (1..num_classes)
            .map(|c| vb.get_with_hints((1, dim), &format!("point_embeddings.{c}.weight"), randn))
            .collect::<candle::Result<Vec<_>>>()?;
        Ok(Self {
            gaussian,
            not_a_point,
            class_embed,
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gaussian_matrix(&self) -> &Tensor {
        &self.gaussian
    }

    pub fn class_embedding(&self, class_id: u8) -> Option<&Tensor> {
        (class_id as usize).checked_sub(1).and_then(|i| self.class_embed.get(i))
    }

    pub fn no_prompt_embedding(&self) -> &Tensor {
        &self.not_a_point
    }

    /// Fourier features of (K, 2) coordinates already scaled to [0, 1].
    fn fourier(&self, coords: &Tensor) -> candle::Result<Tensor> {
        let c = ((coords * 2.0)? - 1.0)?;
        let c = (c.matmul(&self.gaussian)? * TAU)?;
        Tensor::cat(&[c.sin()?, c.cos()?], candle::D::Minus1)
    }

    /// Sparse embeddings (K, D) for the prompts, or the single no-prompt row
    /// when the set is empty.
    pub fn encode(&self, prompts: &PromptSet, (height, width): (usize, usize)) -> Result<Tensor> {
        prompts.validate(height, width, self.class_embed.len() + 1)?;
        if prompts.is_empty() {
            return Ok(self.not_a_point.clone());
        }
        let k = prompts.len();
        let mut coords = Vec::with_capacity(2 * k);
        for p in &prompts.points {
            coords.push((p.x as f64 + 0.5) / width as f64);
            coords.push((p.y as f64 + 0.5) / height as f64);
        }
        let coords = Tensor::from_vec(coords, (k, 2), self.gaussian.device())?.to_dtype(self.gaussian.dtype())?;
        let pe = self.fourier(&coords)?;
        let labels = prompts
            .points
            .iter()
            .map(|p| self.class_embed[p.class_id as usize - 1].clone())
            .collect::<Vec<_>>();
        Ok((pe + Tensor::cat(&labels, 0)?)?)
    }

    /// Dense positional encoding (D, h, w) of the image-embedding grid.
    pub fn dense_pe(&self, h: usize, w: usize) -> Result<Tensor> {
        let mut coords = Vec::with_capacity(2 * h * w);
        for y in 0..h {
            for x in 0..w {
                coords.push((x as f64 + 0.5) / w as f64);
                coords.push((y as f64 + 0.5) / h as f64);
            }
        }
        let coords = Tensor::from_vec(coords, (h * w, 2), self.gaussian.device())?.to_dtype(self.gaussian.dtype())?;
        Ok(self.fourier(&coords)?.t()?.reshape((self.dim, h, w))?)
    }
}

impl Module for PromptEncoder {
    fn forward(&self, coords: &Tensor) -> candle::Result<Tensor> {
        self.fourier(coords)
    }
}

/// Query tokens: the N learned mask tokens followed by the K prompt rows.
pub fn build_queries(prompt_embeddings: &Tensor, mask_tokens: &Tensor) -> Result<Tensor> {
    let (_, dp) = prompt_embeddings.dims2()?;
    let (_, dm) = mask_tokens.dims2()?;
    if dp != dm {
        return Err(Error::Shape(format!(
            "prompt embeddings have width {dp}, mask tokens {dm}"
        )));
    }
    Ok(Tensor::cat(&[mask_tokens, prompt_embeddings], 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle::{DType, Device};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn label() -> Array2<u8> {
        let mut l = Array2::zeros((16, 16));
        for y in 2..8 {
            for x in 2..8 {
                l[[y, x]] = 1;
            }
        }
        l[[12, 12]] = 2;
        l[[12, 13]] = 2;
        l
    }

    fn encoder(dim: usize) -> PromptEncoder {
        let store = ParamStore::new(7);
        PromptEncoder::new(dim, 3, store.var_builder(DType::F64, &Device::Cpu).pp("prompt_encoder")).unwrap()
    }

    #[test]
    fn zero_points_gives_empty_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_points(&label(), 0, 3, &mut rng).is_empty());
    }

    #[test]
    fn samples_inside_class_regions_with_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = label();
        let p = sample_points(&l, 3, 3, &mut rng);
        assert_eq!(p.len(), 5);
        assert_eq!(p.points.iter().filter(|q| q.class_id == 1).count(), 3);
        assert_eq!(p.points.iter().filter(|q| q.class_id == 2).count(), 2);
        for q in &p.points {
            assert_eq!(l[[q.y, q.x]], q.class_id);
        }
        let unique: std::collections::HashSet<_> = p.points.iter().collect();
        assert_eq!(unique.len(), p.len());
    }

    #[test]
    fn absent_class_contributes_nothing() {
        let mut l = label();
        l.mapv_inplace(|v| if v == 2 { 0 } else { v });
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = sample_points(&l, 3, 3, &mut rng);
        assert_eq!(p.len(), 3);
        assert!(p.points.iter().all(|q| q.class_id == 1));
    }

    #[test]
    fn sampling_is_deterministic_for_seed() {
        let a = sample_points(&label(), 3, 3, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_points(&label(), 3, 3, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn empty_prompt_is_the_no_prompt_row() {
        let enc = encoder(16);
        let e = enc.encode(&PromptSet::empty(), (32, 32)).unwrap();
        assert_eq!(e.dims(), &[1, 16]);
        assert_eq!(
            e.to_vec2::<f64>().unwrap(),
            enc.no_prompt_embedding().to_vec2::<f64>().unwrap()
        );
    }

    #[test]
    fn identical_points_identical_rows() {
        let enc = encoder(16);
        let p = PromptPoint { x: 3, y: 9, class_id: 1 };
        let rows = enc
            .encode(&PromptSet { points: vec![p, p] }, (32, 32))
            .unwrap()
            .to_vec2::<f64>()
            .unwrap();
        assert_eq!(rows[0], rows[1]);
    }

    #[test]
    fn class_change_shifts_by_embedding_delta() {
        let enc = encoder(16);
        let (x, y, size) = (5usize, 20usize, 32usize);
        let rows = enc
            .encode(
                &PromptSet {
                    points: vec![
                        PromptPoint { x, y, class_id: 1 },
                        PromptPoint { x, y, class_id: 2 },
                    ],
                },
                (size, size),
            )
            .unwrap()
            .to_vec2::<f64>()
            .unwrap();
        // positional part computed directly from the gaussian matrix
        let g = enc.gaussian_matrix().to_vec2::<f64>().unwrap();
        let cx = 2.0 * (x as f64 + 0.5) / size as f64 - 1.0;
        let cy = 2.0 * (y as f64 + 0.5) / size as f64 - 1.0;
        let proj: Vec<f64> = (0..8).map(|j| TAU * (cx * g[0][j] + cy * g[1][j])).collect();
        let pos: Vec<f64> = proj.iter().map(|v| v.sin()).chain(proj.iter().map(|v| v.cos())).collect();
        let e1 = enc.class_embedding(1).unwrap().to_vec2::<f64>().unwrap()[0].clone();
        let e2 = enc.class_embedding(2).unwrap().to_vec2::<f64>().unwrap()[0].clone();
        for j in 0..16 {
            assert!((rows[0][j] - pos[j] - e1[j]).abs() < 1e-12);
            assert!((rows[1][j] - pos[j] - e2[j]).abs() < 1e-12);
            assert!(((rows[1][j] - rows[0][j]) - (e2[j] - e1[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_bounds_and_background_points_rejected() {
        let enc = encoder(16);
        let oob = PromptSet {
            points: vec![PromptPoint { x: 1, y: 1, class_id: 1 }, PromptPoint { x: 32, y: 0, class_id: 1 }],
        };
        assert!(matches!(
            enc.encode(&oob, (32, 32)),
            Err(Error::PointOutOfBounds { index: 1, .. })
        ));
        let bg = PromptSet {
            points: vec![PromptPoint { x: 1, y: 1, class_id: 0 }],
        };
        assert!(matches!(enc.encode(&bg, (32, 32)), Err(Error::Prompt(_))));
    }

    #[test]
    fn queries_concatenate_tokens_first() {
        let dev = Device::Cpu;
        let mt = Tensor::randn(0f32, 1.0, (3, 8), &dev).unwrap();
        let pe = Tensor::randn(0f32, 1.0, (6, 8), &dev).unwrap();
        let q = build_queries(&pe, &mt).unwrap();
        assert_eq!(q.dims(), &[9, 8]);
        let head = q.narrow(0, 0, 3).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(head, mt.to_vec2::<f32>().unwrap());
        let enc = encoder(8);
        let empty = enc.encode(&PromptSet::empty(), (16, 16)).unwrap().to_dtype(DType::F32).unwrap();
        assert_eq!(build_queries(&empty, &mt).unwrap().dims(), &[4, 8]);
        let bad = Tensor::zeros((2, 4), DType::F32, &dev).unwrap();
        assert!(matches!(build_queries(&bad, &mt), Err(Error::Shape(_))));
    }

    #[test]
    fn rescale_maps_centers() {
        let p = PromptSet {
            points: vec![PromptPoint { x: 223, y: 0, class_id: 1 }, PromptPoint { x: 111, y: 112, class_id: 2 }],
        };
        let r = p.rescaled((224, 224), (32, 32));
        assert_eq!(r.points[0].x, 31);
        assert_eq!(r.points[0].y, 0);
        assert!(r.points.iter().all(|q| q.x < 32 && q.y < 32));
    }

    #[test]
    fn dense_pe_shape() {
        let enc = encoder(16);
        assert_eq!(enc.dense_pe(3, 5).unwrap().dims(), &[16, 3, 5]);
    }
}
