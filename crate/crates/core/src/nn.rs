//! Differentiable building blocks shared by the encoder and decoder.
//!
//! Everything here is composed from candle primitives that have a backward
//! pass, so the whole network can be differentiated end to end.

use candle::{DType, Device, Module, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig, Linear, VarBuilder};

pub fn linear(in_dim: usize, out_dim: usize, bias: bool, vb: VarBuilder) -> candle::Result<Linear> {
    if bias {
        candle_nn::linear(in_dim, out_dim, vb)
    } else {
        candle_nn::linear_no_bias(in_dim, out_dim, vb)
    }
}

pub fn conv2d(
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    bias: bool,
    vb: VarBuilder,
) -> candle::Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: kernel / 2,
        ..Default::default()
    };
    if bias {
        candle_nn::conv2d(in_ch, out_ch, kernel, cfg, vb)
    } else {
        candle_nn::conv2d_no_bias(in_ch, out_ch, kernel, cfg, vb)
    }
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last_dim(xs: &Tensor) -> candle::Result<Tensor> {
    let max = xs.max_keepdim(D::Minus1)?.detach();
    let exp = xs.broadcast_sub(&max)?.exp()?;
    let sum = exp.sum_keepdim(D::Minus1)?;
    exp.broadcast_div(&sum)
}

pub fn log_softmax(xs: &Tensor, dim: usize) -> candle::Result<Tensor> {
    let max = xs.max_keepdim(dim)?.detach();
    let shifted = xs.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(dim)?.log()?;
    shifted.broadcast_sub(&lse)
}

/// Layer norm over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, eps: f64, vb: VarBuilder) -> candle::Result<Self> {
        let weight = vb.get_with_hints(dim, "weight", candle_nn::Init::Const(1.))?;
        let bias = vb.get_with_hints(dim, "bias", candle_nn::Init::Const(0.))?;
        Ok(Self { weight, bias, eps })
    }
}

impl Module for LayerNorm {
    fn forward(&self, xs: &Tensor) -> candle::Result<Tensor> {
        let mean = xs.mean_keepdim(D::Minus1)?;
        let xs = xs.broadcast_sub(&mean)?;
        let var = xs.sqr()?.mean_keepdim(D::Minus1)?;
        let xs = xs.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        xs.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

/// Layer norm across the channel axis of an NCHW tensor.
#[derive(Debug, Clone)]
pub struct LayerNorm2d {
    weight: Tensor,
    bias: Tensor,
    channels: usize,
    eps: f64,
}

impl LayerNorm2d {
    pub fn new(channels: usize, eps: f64, vb: VarBuilder) -> candle::Result<Self> {
        let weight = vb.get_with_hints(channels, "weight", candle_nn::Init::Const(1.))?;
        let bias = vb.get_with_hints(channels, "bias", candle_nn::Init::Const(0.))?;
        Ok(Self {
            weight,
            bias,
            channels,
            eps,
        })
    }
}

impl Module for LayerNorm2d {
    fn forward(&self, xs: &Tensor) -> candle::Result<Tensor> {
        let u = xs.mean_keepdim(1)?;
        let xs = xs.broadcast_sub(&u)?;
        let s = xs.sqr()?.mean_keepdim(1)?;
        let xs = xs.broadcast_div(&(s + self.eps)?.sqrt()?)?;
        xs.broadcast_mul(&self.weight.reshape((1, self.channels, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, self.channels, 1, 1))?)
    }
}

/// conv3x3 -> channel layer norm -> GELU, applied twice.
#[derive(Debug, Clone)]
pub struct DoubleConv {
    conv1: Conv2d,
    norm1: LayerNorm2d,
    conv2: Conv2d,
    norm2: LayerNorm2d,
}

impl DoubleConv {
    pub fn new(in_ch: usize, out_ch: usize, vb: VarBuilder) -> candle::Result<Self> {
        Ok(Self {
            conv1: conv2d(in_ch, out_ch, 3, true, vb.pp("conv1"))?,
            norm1: LayerNorm2d::new(out_ch, 1e-6, vb.pp("norm1"))?,
            conv2: conv2d(out_ch, out_ch, 3, true, vb.pp("conv2"))?,
            norm2: LayerNorm2d::new(out_ch, 1e-6, vb.pp("norm2"))?,
        })
    }
}

impl Module for DoubleConv {
    fn forward(&self, xs: &Tensor) -> candle::Result<Tensor> {
        xs.apply(&self.conv1)?
            .apply(&self.norm1)?
            .gelu_erf()?
            .apply(&self.conv2)?
            .apply(&self.norm2)?
            .gelu_erf()
    }
}

/// Source index pairs and weights for resampling a length-`input` axis to
/// length `output` with half-pixel centers (no corner alignment).
///
/// Each output sample is `(1 - w) * x[i0] + w * x[i1]`.
pub fn linear_taps(output: usize, input: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let w = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, w)
        })
        .collect()
}

/// Dense `output x input` interpolation matrix for [`linear_taps`].
pub fn interp_matrix(
    output: usize,
    input: usize,
    dtype: DType,
    device: &Device,
) -> candle::Result<Tensor> {
    let mut m = vec![0f64; output * input];
    for (o, (i0, i1, w)) in linear_taps(output, input).into_iter().enumerate() {
        m[o * input + i0] += 1.0 - w;
        m[o * input + i1] += w;
    }
    Tensor::from_vec(m, (output, input), device)?.to_dtype(dtype)
}

/// Bilinear resize of the two trailing axes, expressed as two matrix products
/// so that it is differentiable.
pub fn resize_bilinear(xs: &Tensor, out_h: usize, out_w: usize) -> candle::Result<Tensor> {
    let dims = xs.dims();
    let rank = dims.len();
    if rank < 2 {
        candle::bail!("resize_bilinear expects at least two dims, got {dims:?}");
    }
    let (h, w) = (dims[rank - 2], dims[rank - 1]);
    if (h, w) == (out_h, out_w) {
        return Ok(xs.clone());
    }
    let rows = interp_matrix(out_h, h, xs.dtype(), xs.device())?;
    let cols = interp_matrix(out_w, w, xs.dtype(), xs.device())?.t()?;
    let xs = xs.broadcast_matmul(&cols)?;
    rows.broadcast_matmul(&xs)
}

pub fn upsample2x(xs: &Tensor) -> candle::Result<Tensor> {
    let (_, _, h, w) = xs.dims4()?;
    resize_bilinear(xs, 2 * h, 2 * w)
}

/// 2x2 max pooling, stride 2.
///
/// The gradient of each window goes to a single element (the first maximum).
/// candle's own pooling hands it to every tied maximum, which overcounts on
/// the flat regions that clamped CT windows produce.
pub fn max_pool2x2(xs: &Tensor) -> candle::Result<Tensor> {
    let (b, c, h, w) = xs.dims4()?;
    let (oh, ow) = (h / 2, w / 2);
    let windows = xs
        .narrow(2, 0, 2 * oh)?
        .narrow(3, 0, 2 * ow)?
        .reshape((b, c, oh, 2, ow, 2))?
        .permute((0, 1, 2, 4, 3, 5))?
        .reshape((b, c, oh, ow, 4))?;
    let idx = windows.detach().argmax_keepdim(4)?;
    windows.gather(&idx, 4)?.squeeze(4)
}
