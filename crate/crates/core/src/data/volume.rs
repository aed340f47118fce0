use std::str::FromStr;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Minimum in-plane extent accepted for a CT slice.
pub const MIN_SLICE_EXTENT: usize = 32;

/// Raw CT scan in Hounsfield units, laid out as (slices, height, width).
#[derive(Clone, Debug)]
pub struct CTVolume {
    voxels: Array3<f32>,
    /// Millimetres per voxel along (slice, row, column).
    pub spacing: [f64; 3],
    pub patient_id: String,
}

impl CTVolume {
    pub fn new(voxels: Array3<f32>, spacing: [f64; 3], patient_id: impl Into<String>) -> Result<Self> {
        let (s, h, w) = voxels.dim();
        if s == 0 {
            return Err(Error::Shape("volume has no slices".into()));
        }
        if h < MIN_SLICE_EXTENT || w < MIN_SLICE_EXTENT {
            return Err(Error::Shape(format!(
                "slice extent {h}x{w} is below {MIN_SLICE_EXTENT}x{MIN_SLICE_EXTENT}"
            )));
        }
        if let Some((idx, _)) = voxels.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                index: vec![idx.0, idx.1, idx.2],
            });
        }
        Ok(Self {
            voxels,
            spacing,
            patient_id: patient_id.into(),
        })
    }

    pub fn voxels(&self) -> &Array3<f32> {
        &self.voxels
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.voxels.dim()
    }
}

/// Per-voxel class ids paired with a [`CTVolume`]; class 0 is background.
#[derive(Clone, Debug)]
pub struct LabelVolume {
    labels: Array3<u8>,
    pub class_names: Vec<String>,
}

impl LabelVolume {
    pub fn new(labels: Array3<u8>, class_names: Vec<String>) -> Result<Self> {
        let n = class_names.len();
        if n < 2 {
            return Err(Error::Invalid("need background plus at least one class".into()));
        }
        if let Some((idx, v)) = labels.indexed_iter().find(|(_, &v)| v as usize >= n) {
            return Err(Error::Invalid(format!(
                "label {v} at {:?} exceeds class count {n}",
                [idx.0, idx.1, idx.2]
            )));
        }
        Ok(Self {
            labels,
            class_names,
        })
    }

    pub fn labels(&self) -> &Array3<u8> {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// Intensity window in HU.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub center: f32,
    pub width: f32,
}

impl Default for Window {
    /// Abdominal soft-tissue window.
    fn default() -> Self {
        Self {
            center: 40.0,
            width: 400.0,
        }
    }
}

impl Window {
    pub fn new(center: f32, width: f32) -> Result<Self> {
        if !(width > 0.0 && width.is_finite()) || !center.is_finite() {
            return Err(Error::Invalid(format!(
                "window needs finite center and positive width, got {center}:{width}"
            )));
        }
        Ok(Self { center, width })
    }

    #[inline]
    pub fn apply(&self, hu: f32) -> f32 {
        let lo = self.center - self.width / 2.0;
        ((hu - lo) / self.width).clamp(0.0, 1.0)
    }
}

impl FromStr for Window {
    type Err = Error;

    /// Parses `center:width`, e.g. `40:400`.
    fn from_str(s: &str) -> Result<Self> {
        let (c, w) = s
            .split_once(':')
            .ok_or_else(|| Error::Invalid(format!("expected CENTER:WIDTH, got {s:?}")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<f32>()
                .map_err(|e| Error::Invalid(format!("bad window component {v:?}: {e}")))
        };
        Window::new(parse(c)?, parse(w)?)
    }
}

/// Clamp-and-scale HU windowing into [0, 1].
pub fn window_normalize(volume: &CTVolume, window: Window) -> Result<Array3<f32>> {
    let window = Window::new(window.center, window.width)?;
    if let Some((idx, _)) = volume.voxels.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            index: vec![idx.0, idx.1, idx.2],
        });
    }
    Ok(volume.voxels.mapv(|hu| window.apply(hu)))
}
