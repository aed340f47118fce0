//! Procedural stand-in for annotated pelvic CT.
//!
//! Each synthetic patient is a short stack of slices showing a ring-shaped
//! wall (class 1) around a dark lumen, optionally with a bright blob sitting
//! on the outer wall boundary (class 2). An optional distractor ring, with
//! its own blob drawn the same way, looks identical but is labelled
//! background, so only a prompt can tell the two apart.

use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{write_dataset, DatasetManifest, Split};
use super::pairs::{build_slice_pairs, SlicePair};
use super::volume::{CTVolume, LabelVolume, Window};
use crate::{Error, Result};

const MARGIN: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_volumes: usize,
    pub slices_per_volume: usize,
    pub image_size: usize,
    /// Outer ring radius range in pixels.
    pub outer_radius: [f64; 2],
    pub wall_thickness: [f64; 2],
    /// Per-slice probability of a class-2 blob.
    pub tumor_prob: f64,
    pub tumor_radius: [f64; 2],
    /// Per-volume probability of a background-labelled look-alike ring.
    pub distractor_prob: f64,
    /// Gaussian noise standard deviation in HU.
    pub noise_hu: f64,
    pub background_hu: f64,
    pub lumen_hu: f64,
    pub wall_hu: f64,
    pub tumor_hu: f64,
    pub seed: u64,
    pub patient_prefix: String,
    pub split: Split,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_volumes: 4,
            slices_per_volume: 8,
            image_size: 224,
            outer_radius: [28.0, 40.0],
            wall_thickness: [10.0, 14.0],
            tumor_prob: 0.6,
            tumor_radius: [10.0, 15.0],
            distractor_prob: 0.0,
            noise_hu: 15.0,
            background_hu: -100.0,
            lumen_hu: -400.0,
            wall_hu: 60.0,
            tumor_hu: 150.0,
            seed: 0,
            patient_prefix: "syn".into(),
            split: Split::Train,
        }
    }
}

pub fn class_names() -> Vec<String> {
    vec!["background".into(), "rectum".into(), "tumor".into()]
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] > 0.0 && r[0] <= r[1]) {
        return Err(Error::Config(format!("{name} must be a positive [lo, hi] range, got {r:?}")));
    }
    Ok(())
}

impl SyntheticSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SyntheticSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_volumes == 0 || self.slices_per_volume == 0 {
            return Err(Error::Config("need at least one volume and one slice".into()));
        }
        if self.image_size < 32 {
            return Err(Error::Config("image_size must be at least 32".into()));
        }
        check_range("outer_radius", self.outer_radius)?;
        check_range("wall_thickness", self.wall_thickness)?;
        check_range("tumor_radius", self.tumor_radius)?;
        for (name, p) in [("tumor_prob", self.tumor_prob), ("distractor_prob", self.distractor_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1]")));
            }
        }
        if self.wall_thickness[1] >= self.outer_radius[0] {
            return Err(Error::Geometry("wall thicker than the smallest ring".into()));
        }
        if self.noise_hu.is_nan() || self.noise_hu < 0.0 {
            return Err(Error::Config("noise_hu must be non-negative".into()));
        }
        let extent = self.outer_radius[1] + self.tumor_radius[1] + MARGIN + 2.0;
        if 2.0 * extent > self.image_size as f64 {
            return Err(Error::Geometry(format!(
                "ring of radius {} with blob {} does not fit a {} px image",
                self.outer_radius[1], self.tumor_radius[1], self.image_size
            )));
        }
        let contrasts = [
            (self.wall_hu - self.background_hu).abs(),
            (self.tumor_hu - self.wall_hu).abs(),
            (self.tumor_hu - self.background_hu).abs(),
        ];
        if contrasts.iter().any(|&c| c <= self.noise_hu) {
            return Err(Error::Config("class intensity contrast must exceed the noise level".into()));
        }
        if !is_valid_prefix(&self.patient_prefix) {
            return Err(Error::Config(format!("bad patient_prefix {:?}", self.patient_prefix)));
        }
        Ok(())
    }
}

fn is_valid_prefix(p: &str) -> bool {
    !p.is_empty() && p.chars().all(|c| c.is_ascii_alphanumeric() || c == '-')
}

struct Ring {
    cy: f64,
    cx: f64,
    outer: f64,
    thickness: f64,
}

impl Ring {
    fn contains_wall(&self, y: f64, x: f64) -> bool {
        let d = ((y - self.cy).powi(2) + (x - self.cx).powi(2)).sqrt();
        d <= self.outer && d >= self.outer - self.thickness
    }

    fn contains_lumen(&self, y: f64, x: f64) -> bool {
        let d = ((y - self.cy).powi(2) + (x - self.cx).powi(2)).sqrt();
        d < self.outer - self.thickness
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

/// Deterministic synthetic volumes for a spec.
pub fn synthesize_volumes(spec: &SyntheticSpec) -> Result<Vec<(CTVolume, LabelVolume)>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.image_size;
    let sf = size as f64;
    let reach = spec.outer_radius[1] + spec.tumor_radius[1] + MARGIN;
    let noise = Normal::new(0.0, spec.noise_hu.max(1e-12)).expect("valid normal");
    let mut out = Vec::with_capacity(spec.n_volumes);

    for v in 0..spec.n_volumes {
        let base_outer = uniform(&mut rng, spec.outer_radius);
        let thickness = uniform(&mut rng, spec.wall_thickness).min(base_outer - 1.0);
        let mut cy = rng.random_range(reach..=(sf - reach));
        let mut cx = rng.random_range(reach..=(sf - reach));
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let tumor_angle = rng.random_range(0.0..std::f64::consts::TAU);
        let tumor_r = uniform(&mut rng, spec.tumor_radius);

        let distractor = if rng.random_bool(spec.distractor_prob) {
            let outer = uniform(&mut rng, spec.outer_radius);
            let thick = uniform(&mut rng, spec.wall_thickness).min(outer - 1.0);
            let blob_r = uniform(&mut rng, spec.tumor_radius);
            let blob_angle = rng.random_range(0.0..std::f64::consts::TAU);
            let edge = outer + blob_r + MARGIN;
            let mut placed = None;
            for _ in 0..200 {
                let dy = rng.random_range(edge..=(sf - edge));
                let dx = rng.random_range(edge..=(sf - edge));
                let sep = ((dy - cy).powi(2) + (dx - cx).powi(2)).sqrt();
                // leave room for center drift and the blob
                if sep > outer + blob_r + reach + 2.0 * spec.slices_per_volume as f64 {
                    placed = Some((
                        Ring {
                            cy: dy,
                            cx: dx,
                            outer,
                            thickness: thick,
                        },
                        blob_r,
                        blob_angle,
                    ));
                    break;
                }
            }
            placed
        } else {
            None
        };

        let slices = spec.slices_per_volume;
        let mut hu = Array3::<f32>::zeros((slices, size, size));
        let mut lab = Array3::<u8>::zeros((slices, size, size));
        for s in 0..slices {
            let outer = (base_outer + 2.0 * (phase + 0.35 * s as f64).sin())
                .clamp(thickness + 1.0, spec.outer_radius[1]);
            let ring = Ring {
                cy,
                cx,
                outer,
                thickness,
            };
            let tumor = if rng.random_bool(spec.tumor_prob) {
                let a = tumor_angle + rng.random_range(-0.2..0.2);
                Some((cy + outer * a.sin(), cx + outer * a.cos()))
            } else {
                None
            };
            let decoy = distractor.as_ref().and_then(|(d, r, angle)| {
                rng.random_bool(spec.tumor_prob).then(|| {
                    let a = angle + rng.random_range(-0.2..0.2);
                    (d.cy + d.outer * a.sin(), d.cx + d.outer * a.cos(), *r)
                })
            });
            for y in 0..size {
                for x in 0..size {
                    let (py, px) = (y as f64, x as f64);
                    let mut value = spec.background_hu;
                    let mut class = 0u8;
                    if let Some((d, _, _)) = &distractor {
                        if d.contains_wall(py, px) {
                            value = spec.wall_hu;
                        } else if d.contains_lumen(py, px) {
                            value = spec.lumen_hu;
                        }
                    }
                    if let Some((ty, tx, r)) = decoy {
                        if (py - ty).powi(2) + (px - tx).powi(2) <= r * r {
                            value = spec.tumor_hu;
                        }
                    }
                    if ring.contains_wall(py, px) {
                        value = spec.wall_hu;
                        class = 1;
                    } else if ring.contains_lumen(py, px) {
                        value = spec.lumen_hu;
                    }
                    if let Some((ty, tx)) = tumor {
                        if (py - ty).powi(2) + (px - tx).powi(2) <= tumor_r * tumor_r {
                            value = spec.tumor_hu;
                            class = 2;
                        }
                    }
                    let n = if spec.noise_hu > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    hu[[s, y, x]] = (value + n) as f32;
                    lab[[s, y, x]] = class;
                }
            }
            if !lab.index_axis(ndarray::Axis(0), s).iter().any(|&c| c == 1) {
                return Err(Error::Geometry(format!("slice {s} of volume {v} lost its ring")));
            }
            // slow drift of the ring center along the stack
            cy = (cy + rng.random_range(-1.5..1.5)).clamp(reach, sf - reach);
            cx = (cx + rng.random_range(-1.5..1.5)).clamp(reach, sf - reach);
        }
        let pid = format!("{}{:03}", spec.patient_prefix, v);
        out.push((
            CTVolume::new(hu, [1.0; 3], pid)?,
            LabelVolume::new(lab, class_names())?,
        ));
    }
    Ok(out)
}

/// Synthetic volumes packed into slice pairs with the default window.
pub fn synthesize_pairs(spec: &SyntheticSpec) -> Result<Vec<SlicePair>> {
    let mut pairs = Vec::new();
    for (vol, lab) in synthesize_volumes(spec)? {
        pairs.extend(build_slice_pairs(&vol, &lab, Window::default())?);
    }
    Ok(pairs)
}

/// Generate and write a synthetic dataset directory.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, out: &Path) -> Result<DatasetManifest> {
    let pairs = synthesize_pairs(spec)?;
    write_dataset(out, &pairs, spec.split, &class_names(), spec.seed)
}
