//! Two-way transformer: tokens attend to the image, the image attends back.

use candle::{Module, Tensor};
use candle_nn::{Linear, VarBuilder};

use crate::nn::{self, LayerNorm};

#[derive(Debug, Clone)]
struct Attention {
    q_proj: Linear,
    k_proj: Linear,
    v_proj: Linear,
    out_proj: Linear,
    heads: usize,
}

impl Attention {
    fn new(dim: usize, heads: usize, downsample: usize, vb: VarBuilder) -> candle::Result<Self> {
        let inner = dim / downsample;
        if !inner.is_multiple_of(heads) {
            candle::bail!("attention width {inner} not divisible by {heads} heads");
        }
        Ok(Self {
            q_proj: nn::linear(dim, inner, true, vb.pp("q_proj"))?,
            k_proj: nn::linear(dim, inner, true, vb.pp("k_proj"))?,
            v_proj: nn::linear(dim, inner, true, vb.pp("v_proj"))?,
            out_proj: nn::linear(inner, dim, true, vb.pp("out_proj"))?,
            heads,
        })
    }

    fn split_heads(&self, xs: &Tensor) -> candle::Result<Tensor> {
        let (b, n, c) = xs.dims3()?;
        xs.reshape((b, n, self.heads, c / self.heads))?
            .transpose(1, 2)?
            .contiguous()
    }

    /// Inputs are (B, tokens, dim).
    fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> candle::Result<Tensor> {
        let q = self.split_heads(&self.q_proj.forward(q)?)?;
        let k = self.split_heads(&self.k_proj.forward(k)?)?;
        let v = self.split_heads(&self.v_proj.forward(v)?)?;
        let (b, h, n, hd) = q.dims4()?;
        let attn = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
        let attn = nn::softmax_last_dim(&attn)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, h * hd))?;
        self.out_proj.forward(&out)
    }
}

#[derive(Debug, Clone)]
struct Block {
    self_attn: Attention,
    norm1: LayerNorm,
    cross_attn_token_to_image: Attention,
    norm2: LayerNorm,
    lin1: Linear,
    lin2: Linear,
    norm3: LayerNorm,
    norm4: LayerNorm,
    cross_attn_image_to_token: Attention,
    skip_first_layer_pe: bool,
}

impl Block {
    fn new(
        dim: usize,
        heads: usize,
        mlp_dim: usize,
        skip_first_layer_pe: bool,
        vb: VarBuilder,
    ) -> candle::Result<Self> {
        Ok(Self {
            self_attn: Attention::new(dim, heads, 1, vb.pp("self_attn"))?,
            norm1: LayerNorm::new(dim, 1e-5, vb.pp("norm1"))?,
            cross_attn_token_to_image: Attention::new(dim, heads, 2, vb.pp("cross_attn_token_to_image"))?,
            norm2: LayerNorm::new(dim, 1e-5, vb.pp("norm2"))?,
            lin1: nn::linear(dim, mlp_dim, true, vb.pp("mlp.lin1"))?,
            lin2: nn::linear(mlp_dim, dim, true, vb.pp("mlp.lin2"))?,
            norm3: LayerNorm::new(dim, 1e-5, vb.pp("norm3"))?,
            norm4: LayerNorm::new(dim, 1e-5, vb.pp("norm4"))?,
            cross_attn_image_to_token: Attention::new(dim, heads, 2, vb.pp("cross_attn_image_to_token"))?,
            skip_first_layer_pe,
        })
    }

    fn forward(
        &self,
        queries: &Tensor,
        keys: &Tensor,
        query_pe: &Tensor,
        key_pe: &Tensor,
    ) -> candle::Result<(Tensor, Tensor)> {
        let queries = if self.skip_first_layer_pe {
            self.self_attn.forward(queries, queries, queries)?
        } else {
            let q = (queries + query_pe)?;
            (queries + self.self_attn.forward(&q, &q, queries)?)?
        };
        let queries = self.norm1.forward(&queries)?;

        let q = (&queries + query_pe)?;
        let k = (keys + key_pe)?;
        let queries = (&queries + self.cross_attn_token_to_image.forward(&q, &k, keys)?)?;
        let queries = self.norm2.forward(&queries)?;

        let mlp = self.lin2.forward(&self.lin1.forward(&queries)?.relu()?)?;
        let queries = self.norm3.forward(&(queries + mlp)?)?;

        let q = (&queries + query_pe)?;
        let k = (keys + key_pe)?;
        let keys = (keys + self.cross_attn_image_to_token.forward(&k, &q, &queries)?)?;
        let keys = self.norm4.forward(&keys)?;
        Ok((queries, keys))
    }
}

#[derive(Debug, Clone)]
pub struct TwoWayTransformer {
    layers: Vec<Block>,
    final_attn_token_to_image: Attention,
    norm_final_attn: LayerNorm,
}

impl TwoWayTransformer {
    pub fn new(
        depth: usize,
        dim: usize,
        heads: usize,
        mlp_dim: usize,
        vb: VarBuilder,
    ) -> candle::Result<Self> {
        let layers = (0..depth)
            .map(|i| Block::new(dim, heads, mlp_dim, i == 0, vb.pp(format!("layers.{i}"))))
            .collect::<candle::Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            final_attn_token_to_image: Attention::new(dim, heads, 2, vb.pp("final_attn_token_to_image"))?,
            norm_final_attn: LayerNorm::new(dim, 1e-5, vb.pp("norm_final_attn"))?,
        })
    }

    /// `image` and `image_pe` are (B, D, h, w); `tokens` is (B, T, D).
    /// Returns the updated tokens (B, T, D) and image features (B, h*w, D).
    pub fn forward(
        &self,
        image: &Tensor,
        image_pe: &Tensor,
        tokens: &Tensor,
    ) -> candle::Result<(Tensor, Tensor)> {
        let image = image.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let image_pe = image_pe.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let mut queries = tokens.clone();
        let mut keys = image;
        for layer in &self.layers {
            (queries, keys) = layer.forward(&queries, &keys, tokens, &image_pe)?;
        }
        let q = (&queries + tokens)?;
        let k = (&keys + &image_pe)?;
        let attn = self.final_attn_token_to_image.forward(&q, &k, &keys)?;
        let queries = self.norm_final_attn.forward(&(queries + attn)?)?;
        Ok((queries, keys))
    }
}
