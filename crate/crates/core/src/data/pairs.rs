use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::resize::{resize_bilinear, resize_nearest};
use super::volume::{window_normalize, CTVolume, LabelVolume, Window};
use crate::{Error, Result};

/// Stored edge length of every packed slice pair.
pub const PAIR_SIZE: usize = 224;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SliceSource {
    pub patient_id: String,
    pub slice_index: usize,
}

impl SliceSource {
    /// File stem used in the dataset layout.
    pub fn stem(&self) -> String {
        format!("{}_{}", self.patient_id, self.slice_index)
    }
}

/// A windowed image slice and its label map.
///
/// Packed pairs are [`PAIR_SIZE`] square; pairs resampled for a smaller
/// model input keep the same invariants at their own size.
#[derive(Clone, Debug, PartialEq)]
pub struct SlicePair {
    pub image: Array2<f32>,
    pub label: Array2<u8>,
    pub source: SliceSource,
}

impl SlicePair {
    pub fn new(image: Array2<f32>, label: Array2<u8>, source: SliceSource, num_classes: usize) -> Result<Self> {
        if image.dim() != label.dim() {
            return Err(Error::Shape(format!(
                "image {:?} and label {:?} differ",
                image.dim(),
                label.dim()
            )));
        }
        if let Some(v) = image.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("image value {v} outside [0, 1]")));
        }
        if let Some(v) = label.iter().find(|&&v| v as usize >= num_classes) {
            return Err(Error::Invalid(format!("label {v} exceeds class count {num_classes}")));
        }
        Ok(Self {
            image,
            label,
            source,
        })
    }

    pub fn size(&self) -> (usize, usize) {
        self.image.dim()
    }

    pub fn has_foreground(&self) -> bool {
        self.label.iter().any(|&v| v != 0)
    }

    /// Resample to `size x size` (bilinear image, nearest label).
    pub fn resized(&self, size: usize) -> SlicePair {
        SlicePair {
            image: resize_bilinear(&self.image, size, size).mapv(|v| v.clamp(0.0, 1.0)),
            label: resize_nearest(&self.label, size, size),
            source: self.source.clone(),
        }
    }
}

/// Keep the slices that contain any foreground label, window them and resize
/// to [`PAIR_SIZE`].
pub fn build_slice_pairs(volume: &CTVolume, labels: &LabelVolume, window: Window) -> Result<Vec<SlicePair>> {
    if volume.dim() != labels.labels().dim() {
        return Err(Error::Shape(format!(
            "volume {:?} and labels {:?} differ",
            volume.dim(),
            labels.labels().dim()
        )));
    }
    let normalized = window_normalize(volume, window)?;
    let n = labels.num_classes();
    let mut out = Vec::new();
    for (idx, (img, lab)) in normalized
        .axis_iter(Axis(0))
        .zip(labels.labels().axis_iter(Axis(0)))
        .enumerate()
    {
        if !lab.iter().any(|&v| v != 0) {
            continue;
        }
        let image = resize_bilinear(&img.to_owned(), PAIR_SIZE, PAIR_SIZE).mapv(|v| v.clamp(0.0, 1.0));
        let label = resize_nearest(&lab.to_owned(), PAIR_SIZE, PAIR_SIZE);
        out.push(SlicePair::new(
            image,
            label,
            SliceSource {
                patient_id: volume.patient_id.clone(),
                slice_index: idx,
            },
            n,
        )?);
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "no foreground slices in volume {}",
            volume.patient_id
        )));
    }
    Ok(out)
}
