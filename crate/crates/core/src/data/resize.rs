use ndarray::Array2;

use crate::nn::linear_taps;

/// Bilinear resize with half-pixel centers.
pub fn resize_bilinear(src: &Array2<f32>, out_h: usize, out_w: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.clone();
    }
    let rows = linear_taps(out_h, h);
    let cols = linear_taps(out_w, w);
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (r0, r1, wr) = rows[y];
        let (c0, c1, wc) = cols[x];
        let (wr, wc) = (wr as f32, wc as f32);
        let top = (1.0 - wc) * src[[r0, c0]] + wc * src[[r0, c1]];
        let bot = (1.0 - wc) * src[[r1, c0]] + wc * src[[r1, c1]];
        (1.0 - wr) * top + wr * bot
    })
}

/// Nearest-neighbour resize; never invents values absent from the input.
pub fn resize_nearest<T: Copy>(src: &Array2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.clone();
    }
    let pick = |o: usize, out: usize, inp: usize| {
        (((o as f64 + 0.5) * inp as f64 / out as f64).floor() as usize).min(inp - 1)
    };
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        src[[pick(y, out_h, h), pick(x, out_w, w)]]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_downsample_picks_block_centers() {
        let src = Array2::from_shape_fn((4, 4), |(y, x)| (y * 4 + x) as u8);
        let out = resize_nearest(&src, 2, 2);
        assert_eq!(out, ndarray::arr2(&[[5u8, 7], [13, 15]]));
    }

    #[test]
    fn bilinear_keeps_range() {
        let src = Array2::from_shape_fn((7, 5), |(y, x)| ((y * 5 + x) % 3) as f32 / 2.0);
        let out = resize_bilinear(&src, 224, 224);
        assert!(out.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
