use std::collections::HashSet;
use std::fs;
use std::io::Cursor;
use std::path::{Component, Path};

use image::{ImageBuffer, Luma};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::pairs::{SlicePair, SliceSource};
use super::volume::{CTVolume, LabelVolume};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRef {
    pub patient_id: String,
    pub slice_index: usize,
    /// Paths relative to the dataset directory.
    pub image: String,
    pub label: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub split: Split,
    pub class_names: Vec<String>,
    pub seed: u64,
    pub pairs: Vec<PairRef>,
}

fn is_safe_relative(p: &str) -> bool {
    let path = Path::new(p);
    !p.is_empty()
        && path
            .components()
            .all(|c| matches!(c, Component::Normal(_)))
}

fn is_safe_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !id.starts_with('.')
}

impl DatasetManifest {
    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_slice(bytes)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Invalid(format!(
                "unsupported manifest version {}",
                self.format_version
            )));
        }
        if self.class_names.len() < 2 || self.class_names.len() > 255 {
            return Err(Error::Invalid(format!(
                "class list must have 2..=255 entries, got {}",
                self.class_names.len()
            )));
        }
        let mut seen = HashSet::new();
        for p in &self.pairs {
            if !is_safe_id(&p.patient_id) {
                return Err(Error::Invalid(format!("unsafe patient id {:?}", p.patient_id)));
            }
            if !is_safe_relative(&p.image) || !is_safe_relative(&p.label) {
                return Err(Error::Invalid(format!(
                    "pair paths must be relative and inside the dataset: {:?}, {:?}",
                    p.image, p.label
                )));
            }
            if !seen.insert((p.patient_id.as_str(), p.slice_index)) {
                return Err(Error::Invalid(format!(
                    "duplicate pair ({}, {})",
                    p.patient_id, p.slice_index
                )));
            }
        }
        Ok(())
    }

    pub fn patients(&self) -> HashSet<&str> {
        self.pairs.iter().map(|p| p.patient_id.as_str()).collect()
    }
}

/// Manifests must not share any patient.
pub fn check_disjoint(a: &DatasetManifest, b: &DatasetManifest) -> Result<()> {
    let shared: Vec<_> = a.patients().intersection(&b.patients()).copied().collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::Invalid(format!("manifests share patients {shared:?}")))
    }
}

fn encode_image_png(image: &Array2<f32>) -> Result<Vec<u8>> {
    let (h, w) = image.dim();
    let buf: Vec<u16> = image
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let img = ImageBuffer::<Luma<u16>, _>::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::Shape("image buffer size".into()))?;
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png)?;
    Ok(out)
}

fn encode_label_png(label: &Array2<u8>) -> Result<Vec<u8>> {
    let (h, w) = label.dim();
    let img = ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, label.iter().copied().collect::<Vec<u8>>())
        .ok_or_else(|| Error::Shape("label buffer size".into()))?;
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), image::ImageFormat::Png)?;
    Ok(out)
}

/// Decode a grayscale PNG to intensities in [0, 1]. 16-bit images are scaled
/// by 1/65535, 8-bit by 1/255.
pub fn read_image_png(bytes: &[u8]) -> Result<Array2<f32>> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        image::DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        image::DynamicImage::ImageLuma16(b) => {
            b.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()
        }
        other => other
            .into_luma16()
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 65535.0)
            .collect(),
    };
    Array2::from_shape_vec((h, w), data).map_err(|e| Error::Shape(e.to_string()))
}

/// Decode an 8-bit class-id PNG.
pub fn read_label_png(bytes: &[u8]) -> Result<Array2<u8>> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
    let img = match img {
        image::DynamicImage::ImageLuma8(b) => b,
        _ => return Err(Error::Invalid("label PNG must be 8-bit grayscale".into())),
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    Array2::from_shape_vec((h, w), img.into_raw()).map_err(|e| Error::Shape(e.to_string()))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Write pairs as `images/<pid>_<slice>.png` (16-bit), `labels/<pid>_<slice>.png`
/// (8-bit) and `manifest.json`.
pub fn write_dataset(
    dir: &Path,
    pairs: &[SlicePair],
    split: Split,
    class_names: &[String],
    seed: u64,
) -> Result<DatasetManifest> {
    for sub in ["images", "labels"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut refs = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let stem = pair.source.stem();
        let image = format!("images/{stem}.png");
        let label = format!("labels/{stem}.png");
        write_atomic(&dir.join(&image), &encode_image_png(&pair.image)?)?;
        write_atomic(&dir.join(&label), &encode_label_png(&pair.label)?)?;
        refs.push(PairRef {
            patient_id: pair.source.patient_id.clone(),
            slice_index: pair.source.slice_index,
            image,
            label,
        });
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        split,
        class_names: class_names.to_vec(),
        seed,
        pairs: refs,
    };
    manifest.validate()?;
    write_atomic(&dir.join(MANIFEST_FILE), manifest.to_json()?.as_bytes())?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<SlicePair>)> {
    let mpath = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest = DatasetManifest::from_json(&bytes)?;
    let n = manifest.class_names.len();
    let mut pairs = Vec::with_capacity(manifest.pairs.len());
    for r in &manifest.pairs {
        let ip = dir.join(&r.image);
        let lp = dir.join(&r.label);
        let image = read_image_png(&fs::read(&ip).map_err(|e| Error::io(&ip, e))?)?;
        let label = read_label_png(&fs::read(&lp).map_err(|e| Error::io(&lp, e))?)?;
        pairs.push(SlicePair::new(
            image,
            label,
            SliceSource {
                patient_id: r.patient_id.clone(),
                slice_index: r.slice_index,
            },
            n,
        )?);
    }
    Ok((manifest, pairs))
}

fn read_npy_f32(path: &Path) -> Result<Array3<f32>> {
    let bad = |e: ndarray_npy::ReadNpyError| Error::Invalid(format!("{}: {e}", path.display()));
    if let Ok(a) = ndarray_npy::read_npy::<_, Array3<f32>>(path) {
        return Ok(a);
    }
    if let Ok(a) = ndarray_npy::read_npy::<_, Array3<i16>>(path) {
        return Ok(a.mapv(f32::from));
    }
    ndarray_npy::read_npy::<_, Array3<f64>>(path)
        .map(|a| a.mapv(|v| v as f32))
        .map_err(bad)
}

fn read_npy_labels(path: &Path) -> Result<Array3<u8>> {
    let bad = |e: ndarray_npy::ReadNpyError| Error::Invalid(format!("{}: {e}", path.display()));
    if let Ok(a) = ndarray_npy::read_npy::<_, Array3<u8>>(path) {
        return Ok(a);
    }
    let wide = ndarray_npy::read_npy::<_, Array3<i64>>(path)
        .or_else(|_| ndarray_npy::read_npy::<_, Array3<i32>>(path).map(|a| a.mapv(i64::from)))
        .map_err(bad)?;
    if let Some(v) = wide.iter().find(|&&v| !(0..=255).contains(&v)) {
        return Err(Error::Invalid(format!("{}: label {v} out of range", path.display())));
    }
    Ok(wide.mapv(|v| v as u8))
}

/// Load `<pid>.npy` HU volumes and their same-named label volumes.
pub fn load_volume_dir(
    volumes: &Path,
    labels: &Path,
    class_names: &[String],
) -> Result<Vec<(CTVolume, LabelVolume)>> {
    let mut stems: Vec<String> = fs::read_dir(volumes)
        .map_err(|e| Error::io(volumes, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "npy"))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    stems.sort();
    let mut out = Vec::with_capacity(stems.len());
    for stem in stems {
        if !is_safe_id(&stem) {
            return Err(Error::Invalid(format!("unsafe patient id {stem:?}")));
        }
        let vp = volumes.join(format!("{stem}.npy"));
        let lp = labels.join(format!("{stem}.npy"));
        let vol = CTVolume::new(read_npy_f32(&vp)?, [1.0; 3], stem.clone())?;
        let lab = LabelVolume::new(read_npy_labels(&lp)?, class_names.to_vec())?;
        out.push((vol, lab));
    }
    Ok(out)
}
