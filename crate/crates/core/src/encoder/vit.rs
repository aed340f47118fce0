use candle::{IndexOp, Module, Tensor, D};
use candle_nn::{Conv2d, Linear, VarBuilder};

use crate::config::BackboneConfig;
use crate::nn::{self, interp_matrix, resize_bilinear, LayerNorm, LayerNorm2d};
use crate::{Error, Result};

/// Resample a (len, dim) relative-position table to `2 * max(q, k) - 1` rows
/// and expand it to (q, k, dim) relative-offset lookups.
fn get_rel_pos(q_size: usize, k_size: usize, rel_pos: &Tensor) -> candle::Result<Tensor> {
    let max_rel_dist = 2 * q_size.max(k_size) - 1;
    let (len, dim) = rel_pos.dims2()?;
    let table = if len != max_rel_dist {
        interp_matrix(max_rel_dist, len, rel_pos.dtype(), rel_pos.device())?.matmul(rel_pos)?
    } else {
        rel_pos.clone()
    };
    let q_scale = (k_size as f64 / q_size as f64).max(1.0);
    let k_scale = (q_size as f64 / k_size as f64).max(1.0);
    let mut idx = Vec::with_capacity(q_size * k_size);
    for q in 0..q_size {
        for k in 0..k_size {
            let c = q as f64 * q_scale - k as f64 * k_scale + (k_size as f64 - 1.0) * k_scale;
            idx.push(c as u32);
        }
    }
    let idx = Tensor::from_vec(idx, q_size * k_size, rel_pos.device())?;
    table.index_select(&idx, 0)?.reshape((q_size, k_size, dim))
}

#[derive(Debug, Clone)]
struct Attention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
    scale: f64,
    rel_pos: Option<(Tensor, Tensor)>,
}

impl Attention {
    fn new(
        dim: usize,
        heads: usize,
        rel_pos_size: Option<(usize, usize)>,
        vb: VarBuilder,
    ) -> candle::Result<Self> {
        let head_dim = dim / heads;
        let qkv = nn::linear(dim, 3 * dim, true, vb.pp("qkv"))?;
        let proj = nn::linear(dim, dim, true, vb.pp("proj"))?;
        let rel_pos = match rel_pos_size {
            Some((h, w)) => {
                let zero = candle_nn::Init::Const(0.0);
                Some((
                    vb.get_with_hints((2 * h - 1, head_dim), "rel_pos_h", zero)?,
                    vb.get_with_hints((2 * w - 1, head_dim), "rel_pos_w", zero)?,
                ))
            }
            None => None,
        };
        Ok(Self {
            qkv,
            proj,
            heads,
            scale: 1.0 / (head_dim as f64).sqrt(),
            rel_pos,
        })
    }

    fn add_decomposed_rel_pos(
        &self,
        attn: Tensor,
        q: &Tensor,
        (h, w): (usize, usize),
    ) -> candle::Result<Tensor> {
        let (rel_h, rel_w) = match &self.rel_pos {
            Some(r) => r,
            None => return Ok(attn),
        };
        let rh = get_rel_pos(h, h, rel_h)?; // (h, h, c)
        let rw = get_rel_pos(w, w, rel_w)?; // (w, w, c)
        let (b, _, c) = q.dims3()?;
        let r_q = q.reshape((b, h, w, c))?;
        // sum_c r_q[b,y,x,c] * rh[y,k,c]
        let bias_h = r_q
            .permute((1, 0, 2, 3))?
            .reshape((h, b * w, c))?
            .matmul(&rh.transpose(1, 2)?)?
            .reshape((h, b, w, h))?
            .permute((1, 0, 2, 3))?;
        // sum_c r_q[b,y,x,c] * rw[x,k,c]
        let bias_w = r_q
            .permute((2, 0, 1, 3))?
            .reshape((w, b * h, c))?
            .matmul(&rw.transpose(1, 2)?)?
            .reshape((w, b, h, w))?
            .permute((1, 2, 0, 3))?;
        attn.reshape((b, h, w, h, w))?
            .broadcast_add(&bias_h.unsqueeze(4)?)?
            .broadcast_add(&bias_w.unsqueeze(3)?)?
            .reshape((b, h * w, h * w))
    }

    fn forward(&self, xs: &Tensor) -> candle::Result<Tensor> {
        let (b, h, w, c) = xs.dims4()?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(&xs.flatten_to(1)?)?
            .reshape((b, h * w, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?
            .reshape((3, b * self.heads, h * w, hd))?;
        let q = qkv.i(0)?.contiguous()?;
        let k = qkv.i(1)?.contiguous()?;
        let v = qkv.i(2)?.contiguous()?;
        let attn = (&q * self.scale)?.matmul(&k.t()?)?;
        let attn = self.add_decomposed_rel_pos(attn, &q, (h, w))?;
        let attn = nn::softmax_last_dim(&attn)?;
        let out = attn
            .matmul(&v)?
            .reshape((b, self.heads, h, w, hd))?
            .permute((0, 2, 3, 1, 4))?
            .reshape((b, h, w, c))?;
        self.proj.forward(&out)
    }
}

#[derive(Debug, Clone)]
struct Mlp {
    lin1: Linear,
    lin2: Linear,
}

impl Module for Mlp {
    fn forward(&self, xs: &Tensor) -> candle::Result<Tensor> {
        xs.apply(&self.lin1)?.gelu_erf()?.apply(&self.lin2)
    }
}

fn window_partition(xs: &Tensor, ws: usize) -> candle::Result<(Tensor, (usize, usize))> {
    let (b, h, w, c) = xs.dims4()?;
    let pad_h = (ws - h % ws) % ws;
    let pad_w = (ws - w % ws) % ws;
    let xs = if pad_h > 0 { xs.pad_with_zeros(1, 0, pad_h)? } else { xs.clone() };
    let xs = if pad_w > 0 { xs.pad_with_zeros(2, 0, pad_w)? } else { xs };
    let (hp, wp) = (h + pad_h, w + pad_w);
    let windows = xs
        .reshape((b, hp / ws, ws, wp / ws, ws, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b * (hp / ws) * (wp / ws), ws, ws, c))?;
    Ok((windows, (hp, wp)))
}

fn window_unpartition(
    windows: &Tensor,
    ws: usize,
    (hp, wp): (usize, usize),
    (h, w): (usize, usize),
) -> candle::Result<Tensor> {
    let c = windows.dim(D::Minus1)?;
    let b = windows.dim(0)? / ((hp / ws) * (wp / ws));
    let xs = windows
        .reshape((b, hp / ws, wp / ws, ws, ws, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, hp, wp, c))?;
    if hp > h || wp > w {
        xs.narrow(1, 0, h)?.narrow(2, 0, w)?.contiguous()
    } else {
        Ok(xs)
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
    window_size: usize,
}

impl Block {
    fn forward(&self, xs: &Tensor) -> candle::Result<Tensor> {
        let shortcut = xs;
        let xs = self.norm1.forward(xs)?;
        let (_, h, w, _) = xs.dims4()?;
        let xs = if self.window_size > 0 {
            let (win, pad_hw) = window_partition(&xs, self.window_size)?;
            let out = self.attn.forward(&win)?;
            window_unpartition(&out, self.window_size, pad_hw, (h, w))?
        } else {
            self.attn.forward(&xs)?
        };
        let xs = (shortcut + xs)?;
        &xs + self.mlp.forward(&self.norm2.forward(&xs)?)?
    }
}

/// Transformer over the tokenized coarsest CNN feature, followed by a neck
/// projecting to the decoder width D.
#[derive(Debug, Clone)]
pub struct VitEncoder {
    pos_embed: Tensor,
    blocks: Vec<Block>,
    neck_conv1: Conv2d,
    neck_ln1: LayerNorm2d,
    neck_conv2: Conv2d,
    neck_ln2: LayerNorm2d,
    embed_dim: usize,
}

impl VitEncoder {
    pub fn new(cfg: &BackboneConfig, vb: VarBuilder) -> candle::Result<Self> {
        let e = cfg.embed_dim;
        let d = cfg.latent_dim();
        let pos_embed = vb.get_with_hints(
            (1, cfg.pos_grid, cfg.pos_grid, e),
            "pos_embed",
            candle_nn::Init::Randn {
                mean: 0.0,
                stdev: 0.02,
            },
        )?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let vb_b = vb.pp(format!("blocks.{i}"));
            let window_size = if cfg.global_attn_indexes.contains(&i) {
                0
            } else {
                cfg.window_size
            };
            let rel = cfg.use_rel_pos.then_some({
                if window_size == 0 {
                    (cfg.pos_grid, cfg.pos_grid)
                } else {
                    (window_size, window_size)
                }
            });
            blocks.push(Block {
                norm1: LayerNorm::new(e, 1e-6, vb_b.pp("norm1"))?,
                attn: Attention::new(e, cfg.heads, rel, vb_b.pp("attn"))?,
                norm2: LayerNorm::new(e, 1e-6, vb_b.pp("norm2"))?,
                mlp: Mlp {
                    lin1: nn::linear(e, cfg.mlp_dim, true, vb_b.pp("mlp.lin1"))?,
                    lin2: nn::linear(cfg.mlp_dim, e, true, vb_b.pp("mlp.lin2"))?,
                },
                window_size,
            });
        }
        Ok(Self {
            pos_embed,
            blocks,
            neck_conv1: nn::conv2d(e, d, 1, false, vb.pp("neck.0"))?,
            neck_ln1: LayerNorm2d::new(d, 1e-6, vb.pp("neck.1"))?,
            neck_conv2: nn::conv2d(d, d, 3, false, vb.pp("neck.2"))?,
            neck_ln2: LayerNorm2d::new(d, 1e-6, vb.pp("neck.3"))?,
            embed_dim: e,
        })
    }

    /// Token features after the transformer blocks, laid out (B, h, w, 3D).
    pub fn encode_tokens(&self, f4: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = f4.dims4()?;
        if c != self.embed_dim {
            return Err(Error::Shape(format!(
                "feature has {c} channels, backbone expects {}",
                self.embed_dim
            )));
        }
        let pos = resize_bilinear(&self.pos_embed.permute((0, 3, 1, 2))?, h, w)?.permute((0, 2, 3, 1))?;
        let mut xs = f4.permute((0, 2, 3, 1))?.broadcast_add(&pos)?;
        for block in &self.blocks {
            xs = block.forward(&xs)?;
        }
        Ok(xs)
    }

    /// Image embedding (B, D, h, w) for the mask decoder.
    pub fn forward(&self, f4: &Tensor) -> Result<Tensor> {
        let xs = self.encode_tokens(f4)?.permute((0, 3, 1, 2))?;
        Ok(xs
            .apply(&self.neck_conv1)?
            .apply(&self.neck_ln1)?
            .apply(&self.neck_conv2)?
            .apply(&self.neck_ln2)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle::{DType, Device};

    fn encoder(cfg: &BackboneConfig, seed: u64) -> (ParamStore, VitEncoder) {
        let store = ParamStore::new(seed);
        let vit = VitEncoder::new(cfg, store.var_builder(DType::F64, &Device::Cpu).pp("image_encoder")).unwrap();
        (store, vit)
    }

    #[test]
    fn tiny_embedding_shape_and_zero_input() {
        let (_, vit) = encoder(&BackboneConfig::tiny(), 1);
        let f4 = Tensor::zeros((1, 192, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let emb = vit.forward(&f4).unwrap();
        assert_eq!(emb.dims(), &[1, 64, 2, 2]);
        let vals = emb.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(vals.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let (_, vit) = encoder(&BackboneConfig::tiny(), 1);
        let f4 = Tensor::zeros((1, 96, 2, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(vit.forward(&f4), Err(Error::Shape(_))));
    }

    #[test]
    fn window_partition_round_trips_with_padding() {
        let x = Tensor::arange(0f64, 2.0 * 5.0 * 3.0 * 4.0, &Device::Cpu)
            .unwrap()
            .reshape((2, 5, 3, 4))
            .unwrap();
        let (win, pad) = window_partition(&x, 4).unwrap();
        assert_eq!(pad, (8, 4));
        assert_eq!(win.dims(), &[4, 4, 4, 4]);
        let back = window_unpartition(&win, 4, pad, (5, 3)).unwrap();
        let diff = (back - &x).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn rel_pos_lookup_indexes_offsets() {
        let table = Tensor::arange(0f64, 5.0, &Device::Cpu).unwrap().reshape((5, 1)).unwrap();
        let r = get_rel_pos(3, 3, &table).unwrap().squeeze(2).unwrap().to_vec2::<f64>().unwrap();
        // entry (q, k) holds offset q - k + 2
        assert_eq!(r, vec![vec![2., 1., 0.], vec![3., 2., 1.], vec![4., 3., 2.]]);
    }

    fn permute_tokens(x: &Tensor, perm: &[usize]) -> Tensor {
        // x: (1, h, w, c) with h = 1
        let idx = Tensor::from_vec(perm.iter().map(|&p| p as u32).collect::<Vec<_>>(), perm.len(), &Device::Cpu).unwrap();
        x.index_select(&idx, 2).unwrap()
    }

    #[test]
    fn tokens_equivariant_only_without_positional_terms() {
        let cfg = BackboneConfig {
            window_size: 0,
            use_rel_pos: false,
            global_attn_indexes: vec![],
            pos_grid: 1,
            ..BackboneConfig::tiny()
        };
        let (store, vit) = encoder(&cfg, 3);
        let f4 = Tensor::randn(0f64, 1.0, (1, 192, 1, 6), &Device::Cpu).unwrap();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let idx = Tensor::from_vec(perm.iter().map(|&p| p as u32).collect::<Vec<_>>(), 6, &Device::Cpu).unwrap();
        let f4_perm = f4.index_select(&idx, 3).unwrap();

        let gap = |vit: &VitEncoder| {
            let a = permute_tokens(&vit.encode_tokens(&f4).unwrap(), &perm);
            let b = vit.encode_tokens(&f4_perm).unwrap();
            (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
        };
        // a 1x1 grid resized to 1x6 is constant, so it cannot break symmetry;
        // use a non-constant table instead
        let pos_name = "image_encoder.pos_embed";
        let zero = Tensor::zeros((1, 1, 1, 192), DType::F64, &Device::Cpu).unwrap();
        store.assign(pos_name, &zero).unwrap();
        assert!(gap(&vit) < 1e-10);

        let cfg2 = BackboneConfig { pos_grid: 6, ..cfg };
        let (store2, vit2) = encoder(&cfg2, 3);
        assert!(gap(&vit2) > 1e-4);
        let zero = Tensor::zeros((1, 6, 6, 192), DType::F64, &Device::Cpu).unwrap();
        store2.assign(pos_name, &zero).unwrap();
        assert!(gap(&vit2) < 1e-10);
    }
}
