//! Cross-entropy plus soft Dice on softmax probabilities.

use candle::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::nn::log_softmax;
use crate::{Error, Result};

pub const DICE_SMOOTH: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { ce: 1.0, dice: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct LossParts {
    pub total: Tensor,
    pub ce: Tensor,
    /// `1 - mean soft Dice`.
    pub dice: Tensor,
}

/// (B, H, W) class ids to (B, N, H, W) one-hot in `dtype`.
pub fn one_hot(labels: &Tensor, num_classes: usize, dtype: DType) -> Result<Tensor> {
    let (b, h, w) = labels.dims3()?;
    let classes = Tensor::arange(0u32, num_classes as u32, labels.device())?.reshape((1, num_classes, 1, 1))?;
    let labels = labels.to_dtype(DType::U32)?.reshape((b, 1, h, w))?;
    Ok(labels.broadcast_eq(&classes)?.to_dtype(dtype)?)
}

/// Loss for logits (B, N, H, W) against class ids (B, H, W).
///
/// Dice is computed per image and class, averaged over all N classes and then
/// over the batch.
pub fn segmentation_loss(logits: &Tensor, labels: &Tensor, weights: LossWeights) -> Result<LossParts> {
    let (b, n, h, w) = logits.dims4()?;
    if labels.dims() != [b, h, w] {
        return Err(Error::Shape(format!(
            "labels {:?} do not match logits {:?}",
            labels.dims(),
            logits.dims()
        )));
    }
    let max_label = labels.to_dtype(DType::U32)?.max_all()?.to_scalar::<u32>()?;
    if max_label as usize >= n {
        return Err(Error::Shape(format!("label {max_label} out of range for {n} classes")));
    }
    let target = one_hot(labels, n, logits.dtype())?;
    let logp = log_softmax(logits, 1)?;
    let ce = (&logp * &target)?.sum(1)?.mean_all()?.neg()?;

    let probs = logp.exp()?;
    let inter = (&probs * &target)?.sum((2, 3))?;
    let denom = (probs.sum((2, 3))? + target.sum((2, 3))?)?;
    let dice = ((inter * 2.0)? + DICE_SMOOTH)?.div(&(denom + DICE_SMOOTH)?)?;
    let dice = (1.0 - dice.mean_all()?)?;

    let total = ((&ce * weights.ce)? + (&dice * weights.dice)?)?;
    let value = total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        let flat = logits.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
            let plane = h * w;
            return Err(Error::NonFinite {
                index: vec![i / (n * plane), (i / plane) % n, (i % plane) / w, i % w],
            });
        }
    }
    Ok(LossParts { total, ce, dice })
}
