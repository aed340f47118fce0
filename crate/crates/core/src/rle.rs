//! Row-major run-length encoding of class maps as `[value, run]` pairs.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub height: usize,
    pub width: usize,
    /// Consecutive `[value, run]` pairs covering the map in row-major order.
    pub runs: Vec<[u32; 2]>,
}

impl Rle {
    pub fn encode(mask: &Array2<u8>) -> Self {
        let (height, width) = mask.dim();
        let mut runs: Vec<[u32; 2]> = Vec::new();
        for &v in mask.iter() {
            match runs.last_mut() {
                Some([last, n]) if *last == v as u32 => *n += 1,
                _ => runs.push([v as u32, 1]),
            }
        }
        Self { height, width, runs }
    }

    pub fn decode(&self) -> Result<Array2<u8>> {
        let total = self
            .height
            .checked_mul(self.width)
            .ok_or_else(|| Error::Rle("dimensions overflow".into()))?;
        let mut out = Vec::with_capacity(total.min(1 << 26));
        for (i, &[value, run]) in self.runs.iter().enumerate() {
            let value = u8::try_from(value).map_err(|_| Error::Rle(format!("run {i} has value {value} > 255")))?;
            if run == 0 {
                return Err(Error::Rle(format!("run {i} has zero length")));
            }
            if out.len() + run as usize > total {
                return Err(Error::Rle(format!("runs exceed {}x{}", self.height, self.width)));
            }
            out.extend(std::iter::repeat_n(value, run as usize));
        }
        if out.len() != total {
            return Err(Error::Rle(format!(
                "runs cover {} pixels, expected {total}",
                out.len()
            )));
        }
        Array2::from_shape_vec((self.height, self.width), out).map_err(|e| Error::Rle(e.to_string()))
    }

    /// Pixel count per class id, indexed by class.
    pub fn class_counts(&self, num_classes: usize) -> Vec<u64> {
        let mut counts = vec![0u64; num_classes];
        for &[v, n] in &self.runs {
            if let Some(c) = counts.get_mut(v as usize) {
                *c += n as u64;
            }
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_encoding() {
        let m = Array2::from_shape_vec((2, 3), vec![0, 0, 1, 1, 1, 2]).unwrap();
        let r = Rle::encode(&m);
        assert_eq!(r.runs, vec![[0, 2], [1, 3], [2, 1]]);
        assert_eq!(r.class_counts(3), vec![2, 3, 1]);
        assert_eq!(r.decode().unwrap(), m);
    }

    #[test]
    fn malformed_rejected() {
        let short = Rle { height: 2, width: 2, runs: vec![[0, 3]] };
        assert!(short.decode().is_err());
        let long = Rle { height: 2, width: 2, runs: vec![[0, 5]] };
        assert!(long.decode().is_err());
        let zero = Rle { height: 1, width: 1, runs: vec![[0, 0], [1, 1]] };
        assert!(zero.decode().is_err());
        let big = Rle { height: 1, width: 1, runs: vec![[300, 1]] };
        assert!(big.decode().is_err());
        let huge = Rle { height: usize::MAX, width: 2, runs: vec![] };
        assert!(huge.decode().is_err());
    }

    proptest! {
        #[test]
        fn round_trip(h in 1usize..20, w in 1usize..20, seed in proptest::collection::vec(0u8..4, 400)) {
            let m = Array2::from_shape_fn((h, w), |(y, x)| seed[y * 20 + x]);
            let r = Rle::encode(&m);
            prop_assert_eq!(r.decode().unwrap(), m);
            prop_assert_eq!(r.runs.iter().map(|p| p[1] as usize).sum::<usize>(), h * w);
        }
    }
}
