use ndarray::{s, Array2};
use rand::Rng;

use super::pairs::SlicePair;

pub const MAX_ROTATION_DEG: f64 = 20.0;

/// Geometric transform applied identically to image and label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentTransform {
    pub hflip: bool,
    pub vflip: bool,
    pub angle_deg: f64,
}

impl AugmentTransform {
    pub const IDENTITY: AugmentTransform = AugmentTransform {
        hflip: false,
        vflip: false,
        angle_deg: 0.0,
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            hflip: rng.random_bool(0.5),
            vflip: rng.random_bool(0.5),
            angle_deg: rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
        }
    }
}

/// Random flips (p = 0.5 each) followed by a rotation in ±20°.
pub fn augment<R: Rng + ?Sized>(pair: &SlicePair, rng: &mut R) -> SlicePair {
    apply_transform(pair, AugmentTransform::sample(rng))
}

pub fn apply_transform(pair: &SlicePair, t: AugmentTransform) -> SlicePair {
    let mut image = pair.image.clone();
    let mut label = pair.label.clone();
    if t.hflip {
        image = image.slice(s![.., ..;-1]).to_owned();
        label = label.slice(s![.., ..;-1]).to_owned();
    }
    if t.vflip {
        image = image.slice(s![..;-1, ..]).to_owned();
        label = label.slice(s![..;-1, ..]).to_owned();
    }
    // tiny or non-finite angles are treated as no rotation
    if t.angle_deg.is_finite() && t.angle_deg.abs() > 1e-6 {
        let (img, lab) = rotate(&image, &label, t.angle_deg.to_radians());
        image = img;
        label = lab;
    }
    SlicePair {
        image,
        label,
        source: pair.source.clone(),
    }
}

/// Mirror a continuous pixel coordinate into `[-0.5, n - 0.5]`.
fn reflect(u: f64, n: usize) -> f64 {
    let period = 2.0 * n as f64;
    let mut v = (u + 0.5).rem_euclid(period);
    if v >= n as f64 {
        v = period - v;
    }
    (v - 0.5).clamp(0.0, n as f64 - 1.0)
}

fn rotate(image: &Array2<f32>, label: &Array2<u8>, theta: f64) -> (Array2<f32>, Array2<u8>) {
    let (h, w) = image.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = theta.sin_cos();
    let mut out_img = Array2::<f32>::zeros((h, w));
    let mut out_lab = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            // inverse map output pixel to source
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let sx = reflect(cos * dx + sin * dy + cx, w);
            let sy = reflect(-sin * dx + cos * dy + cy, h);

            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = (sx - x0 as f64) as f32;
            let fy = (sy - y0 as f64) as f32;
            let top = (1.0 - fx) * image[[y0, x0]] + fx * image[[y0, x1]];
            let bot = (1.0 - fx) * image[[y1, x0]] + fx * image[[y1, x1]];
            out_img[[y, x]] = ((1.0 - fy) * top + fy * bot).clamp(0.0, 1.0);

            let nx = (sx.round() as usize).min(w - 1);
            let ny = (sy.round() as usize).min(h - 1);
            out_lab[[y, x]] = label[[ny, nx]];
        }
    }
    (out_img, out_lab)
}
