//! Decoder-side upsampling: the skip-connected U path, the two-step variant,
//! the token/source combination and the final argmax.

use candle::{Module, Tensor};
use candle_nn::{Conv2d, ConvTranspose2d, ConvTranspose2dConfig, VarBuilder};
use ndarray::Array2;

use crate::encoder::FeaturePyramid;
use crate::nn::{self, resize_bilinear, upsample2x, DoubleConv, LayerNorm2d};
use crate::{Error, Result};

/// Which encoder features are concatenated into the upsampling blocks.
///
/// Skips are enabled innermost first: `k = 1` uses f3 only, `k = 4` uses
/// f3, f2, f1 and f0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SkipConfig {
    pub f3: bool,
    pub f2: bool,
    pub f1: bool,
    pub f0: bool,
}

impl SkipConfig {
    pub fn count(&self) -> u8 {
        [self.f3, self.f2, self.f1, self.f0].iter().filter(|&&b| b).count() as u8
    }
}

pub fn skip_config(k: u8) -> Result<SkipConfig> {
    if k > 4 {
        return Err(Error::Config(format!("skip count must be in 0..=4, got {k}")));
    }
    Ok(SkipConfig {
        f3: k >= 1,
        f2: k >= 2,
        f1: k >= 3,
        f0: k >= 4,
    })
}

fn check_spatial(what: &str, t: &Tensor, h: usize, w: usize) -> Result<()> {
    let (_, _, th, tw) = t.dims4()?;
    if (th, tw) != (h, w) {
        return Err(Error::Shape(format!("{what} is {th}x{tw}, expected {h}x{w}")));
    }
    Ok(())
}

/// Bilinear 2x upsample, optional skip concatenation, then [`DoubleConv`].
///
/// Parameters live under `skip_fuse` when the skip is wired and under `conv`
/// otherwise, so the two wirings never share a name.
#[derive(Debug, Clone)]
pub struct UpBlock {
    conv: DoubleConv,
    with_skip: bool,
}

impl UpBlock {
    pub fn new(
        in_ch: usize,
        skip_ch: usize,
        out_ch: usize,
        with_skip: bool,
        vb: VarBuilder,
    ) -> candle::Result<Self> {
        let conv = if with_skip {
            DoubleConv::new(in_ch + skip_ch, out_ch, vb.pp("skip_fuse"))?
        } else {
            DoubleConv::new(in_ch, out_ch, vb.pp("conv"))?
        };
        Ok(Self { conv, with_skip })
    }

    pub fn forward(&self, xs: &Tensor, skip: &Tensor) -> Result<Tensor> {
        let up = upsample2x(xs)?;
        let (_, _, h, w) = up.dims4()?;
        let xs = if self.with_skip {
            check_spatial("skip feature", skip, h, w)?;
            Tensor::cat(&[&up, skip], 1)?
        } else {
            up
        };
        Ok(self.conv.forward(&xs)?)
    }
}

/// UP4, UP3, UP2 on the source feature and UP1 on the class logits.
#[derive(Debug, Clone)]
pub struct UNetHead {
    up4: UpBlock,
    up3: UpBlock,
    up2: UpBlock,
    up1: UpBlock,
    out: Conv2d,
    skips: SkipConfig,
    dim: usize,
}

impl UNetHead {
    pub fn new(dim: usize, num_classes: usize, skips: SkipConfig, vb: VarBuilder) -> candle::Result<Self> {
        let d = dim;
        Ok(Self {
            up4: UpBlock::new(d, d, d / 2, skips.f3, vb.pp("up4"))?,
            up3: UpBlock::new(d / 2, d / 2, d / 4, skips.f2, vb.pp("up3"))?,
            up2: UpBlock::new(d / 4, d / 4, d / 8, skips.f1, vb.pp("up2"))?,
            up1: UpBlock::new(num_classes, d / 8, d / 8, skips.f0, vb.pp("up1"))?,
            out: nn::conv2d(d / 8, num_classes, 1, true, vb.pp("up1.out"))?,
            skips,
            dim,
        })
    }

    pub fn skips(&self) -> SkipConfig {
        self.skips
    }

    /// (B, D, h, w) source to (B, D/8, 8h, 8w).
    pub fn upsample_source(&self, src: &Tensor, pyr: &FeaturePyramid) -> Result<Tensor> {
        let (b, c, h, w) = src.dims4()?;
        if c != self.dim {
            return Err(Error::Shape(format!("source has {c} channels, decoder width is {}", self.dim)));
        }
        let (pb, _, ph, pw) = pyr.f3.dims4()?;
        if pb != b || (ph, pw) != (2 * h, 2 * w) {
            return Err(Error::Shape(format!(
                "pyramid f3 {:?} does not match source {:?}",
                pyr.f3.dims(),
                src.dims()
            )));
        }
        let x = self.up4.forward(src, &pyr.f3)?;
        let x = self.up3.forward(&x, &pyr.f2)?;
        self.up2.forward(&x, &pyr.f1)
    }

    /// (B, N, H/2, W/2) logits to full-scale (B, N, H, W).
    pub fn restore_full(&self, l_half: &Tensor, f0: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = l_half.dims4()?;
        check_spatial("f0", f0, 2 * h, 2 * w)?;
        let x = self.up1.forward(l_half, f0)?;
        Ok(self.out.forward(&x)?)
    }
}

/// Learned 4x upscaling of the source with transposed convolutions.
#[derive(Debug, Clone)]
pub struct TwoStepHead {
    up_a: ConvTranspose2d,
    norm: LayerNorm2d,
    up_b: ConvTranspose2d,
}

impl TwoStepHead {
    pub fn new(dim: usize, vb: VarBuilder) -> candle::Result<Self> {
        let cfg = ConvTranspose2dConfig {
            stride: 2,
            ..Default::default()
        };
        Ok(Self {
            up_a: candle_nn::conv_transpose2d(dim, dim / 4, 2, cfg, vb.pp("0"))?,
            norm: LayerNorm2d::new(dim / 4, 1e-6, vb.pp("1"))?,
            up_b: candle_nn::conv_transpose2d(dim / 4, dim / 8, 2, cfg, vb.pp("3"))?,
        })
    }

    /// (B, D, h, w) to (B, D/8, 4h, 4w).
    pub fn forward(&self, src: &Tensor) -> Result<Tensor> {
        Ok(src
            .apply(&self.up_a)?
            .apply(&self.norm)?
            .gelu_erf()?
            .apply(&self.up_b)?
            .gelu_erf()?)
    }

    /// Bilinear 4x of the quarter-scale logits.
    pub fn to_full(l_quarter: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = l_quarter.dims4()?;
        Ok(resize_bilinear(l_quarter, 4 * h, 4 * w)?)
    }
}

/// `out[c, i, j] = sum_d tokens[c, d] * source[d, i, j]`.
///
/// Accepts an unbatched pair `(N, C)` and `(C, h, w)`, or a batched pair
/// `(B, N, C)` and `(B, C, h, w)`.
pub fn combine(tokens: &Tensor, source: &Tensor) -> Result<Tensor> {
    match (tokens.rank(), source.rank()) {
        (2, 3) => Ok(combine(&tokens.unsqueeze(0)?, &source.unsqueeze(0)?)?.squeeze(0)?),
        (3, 4) => {
            let (b, n, c) = tokens.dims3()?;
            let (sb, sc, h, w) = source.dims4()?;
            if b != sb || c != sc {
                return Err(Error::Shape(format!(
                    "tokens {:?} cannot combine with source {:?}",
                    tokens.dims(),
                    source.dims()
                )));
            }
            let flat = source.reshape((b, c, h * w))?;
            Ok(tokens.contiguous()?.matmul(&flat)?.reshape((b, n, h, w))?)
        }
        _ => Err(Error::Shape(format!(
            "unsupported ranks for combine: {:?} and {:?}",
            tokens.dims(),
            source.dims()
        ))),
    }
}

/// Per-pixel argmax over the class axis of (N, H, W) logits; ties go to the
/// lowest class id.
pub fn predict_mask(logits: &Tensor) -> Result<Array2<u8>> {
    let (n, h, w) = logits.dims3()?;
    if n == 0 || n > 256 {
        return Err(Error::Shape(format!("{n} classes cannot form a u8 mask")));
    }
    let values = logits.to_dtype(candle::DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let plane = h * w;
    if let Some(i) = values.iter().position(|v| v.is_nan()) {
        return Err(Error::NonFinite {
            index: vec![i / plane, (i % plane) / w, i % w],
        });
    }
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        let p = y * w + x;
        let mut best = 0;
        for c in 1..n {
            if values[c * plane + p] > values[best * plane + p] {
                best = c;
            }
        }
        best as u8
    }))
}
