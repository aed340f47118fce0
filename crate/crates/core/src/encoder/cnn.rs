use candle::{Module, Tensor};
use candle_nn::VarBuilder;

use crate::nn::{self, DoubleConv};
use crate::{Error, Result};

/// Encoder features at scales 1, 1/2, 1/4, 1/8 and 1/16, each NCHW.
///
/// Channel counts are D/8, D/4, D/2, D and 3D.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub f0: Tensor,
    pub f1: Tensor,
    pub f2: Tensor,
    pub f3: Tensor,
    pub f4: Tensor,
}

impl FeaturePyramid {
    pub fn levels(&self) -> [&Tensor; 5] {
        [&self.f0, &self.f1, &self.f2, &self.f3, &self.f4]
    }

    /// Expected (channels, height, width) of each level.
    pub fn expected_shapes(d: usize, h: usize, w: usize) -> [(usize, usize, usize); 5] {
        [
            (d / 8, h, w),
            (d / 4, h / 2, w / 2),
            (d / 2, h / 4, w / 4),
            (d, h / 8, w / 8),
            (3 * d, h / 16, w / 16),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct CnnPyramid {
    stem: DoubleConv,
    downs: Vec<DoubleConv>,
}

impl CnnPyramid {
    pub fn new(d: usize, vb: VarBuilder) -> candle::Result<Self> {
        let stem = DoubleConv::new(3, d / 8, vb.pp("stem"))?;
        let chans = [d / 8, d / 4, d / 2, d, 3 * d];
        let downs = (0..4)
            .map(|i| DoubleConv::new(chans[i], chans[i + 1], vb.pp(format!("down{}", i + 1))))
            .collect::<candle::Result<Vec<_>>>()?;
        Ok(Self { stem, downs })
    }

    /// Each block halves the resolution: max-pool 2x2, then two 3x3 convs.
    pub fn forward(&self, image: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
        }
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("input {h}x{w} is not divisible by 16")));
        }
        let f0 = self.stem.forward(image)?;
        let mut feats = vec![f0];
        for down in &self.downs {
            let prev = feats.last().expect("stem output");
            feats.push(down.forward(&nn::max_pool2x2(prev)?)?);
        }
        let mut it = feats.into_iter();
        Ok(FeaturePyramid {
            f0: it.next().unwrap(),
            f1: it.next().unwrap(),
            f2: it.next().unwrap(),
            f3: it.next().unwrap(),
            f4: it.next().unwrap(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use candle::{DType, Device};
    use proptest::prelude::*;

    fn pyramid(d: usize) -> CnnPyramid {
        let store = ParamStore::new(0);
        CnnPyramid::new(d, store.var_builder(DType::F32, &Device::Cpu).pp("cnn")).unwrap()
    }

    #[test]
    fn tiny_shapes_at_32() {
        let p = pyramid(64);
        let x = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let f = p.forward(&x).unwrap();
        assert_eq!(f.f4.dims(), &[1, 192, 2, 2]);
        assert_eq!(f.f0.dims(), &[1, 8, 32, 32]);
    }

    #[test]
    fn indivisible_input_rejected() {
        let p = pyramid(64);
        let x = Tensor::zeros((1, 3, 40, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(p.forward(&x), Err(Error::Shape(_))));
        let x = Tensor::zeros((1, 1, 32, 32), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(p.forward(&x), Err(Error::Shape(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(6))]
        #[test]
        fn shape_chain_holds(hm in 1usize..5, wm in 1usize..5) {
            let (h, w) = (16 * hm, 16 * wm);
            let p = pyramid(24);
            let x = Tensor::ones((2, 3, h, w), DType::F32, &Device::Cpu).unwrap();
            let f = p.forward(&x).unwrap();
            for (level, (c, eh, ew)) in f.levels().iter().zip(FeaturePyramid::expected_shapes(24, h, w)) {
                prop_assert_eq!(level.dims(), &[2, c, eh, ew]);
            }
        }
    }
}
