//! Three-axis rotary position embedding.
//!
//! The per-head vector is split into `(d_t, d_h, d_w)` slices. Each slice is
//! an ordinary 1D rotary embedding (half-split layout: element `j` pairs with
//! `j + d/2`) driven by one coordinate of the token.

use candle_core::{DType, Device, Tensor};

use crate::dit::config::validate_rope_split;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rope3d {
    split: [usize; 3],
    base: f64,
}

impl Rope3d {
    pub fn new(split: [usize; 3], base: f64) -> Result<Self> {
        validate_rope_split(split, split.iter().sum())?;
        Ok(Self { split, base })
    }

    pub fn head_dim(&self) -> usize {
        self.split.iter().sum()
    }

    fn slice_offsets(&self) -> [usize; 3] {
        [0, self.split[0], self.split[0] + self.split[1]]
    }

    /// Per-element rotation angles for one token; both members of a pair share an angle.
    pub fn angles(&self, coord: [usize; 3]) -> Vec<f64> {
        let mut out = vec![0.0; self.head_dim()];
        for (axis, (&d, &off)) in self.split.iter().zip(&self.slice_offsets()).enumerate() {
            let half = d / 2;
            for j in 0..half {
                let freq = self.base.powf(-(2.0 * j as f64) / d as f64);
                let a = coord[axis] as f64 * freq;
                out[off + j] = a;
                out[off + j + half] = a;
            }
        }
        out
    }

    /// Rotates one per-head vector in place.
    pub fn rotate(&self, v: &mut [f64], coord: [usize; 3]) {
        assert_eq!(v.len(), self.head_dim(), "vector length must equal head_dim");
        let angles = self.angles(coord);
        for (&d, &off) in self.split.iter().zip(&self.slice_offsets()) {
            let half = d / 2;
            for j in 0..half {
                let (c, s) = (angles[off + j].cos(), angles[off + j].sin());
                let (a, b) = (v[off + j], v[off + j + half]);
                v[off + j] = a * c - b * s;
                v[off + j + half] = b * c + a * s;
            }
        }
    }

    /// Cosine and sine tables `(N, head_dim)` for a token sequence.
    pub fn tables(&self, coords: &[[usize; 3]], dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
        let hd = self.head_dim();
        let mut cos = Vec::with_capacity(coords.len() * hd);
        let mut sin = Vec::with_capacity(coords.len() * hd);
        for &c in coords {
            for a in self.angles(c) {
                cos.push(a.cos());
                sin.push(a.sin());
            }
        }
        let cos = Tensor::from_vec(cos, (coords.len(), hd), device)?.to_dtype(dtype)?;
        let sin = Tensor::from_vec(sin, (coords.len(), hd), device)?.to_dtype(dtype)?;
        Ok((cos, sin))
    }

    /// Applies the rotation to `(..., N, head_dim)` using tables from [`Rope3d::tables`].
    pub fn apply(&self, x: &Tensor, cos: &Tensor, sin: &Tensor) -> Result<Tensor> {
        let last = x.rank() - 1;
        let mut rotated = Vec::with_capacity(6);
        for (&d, &off) in self.split.iter().zip(&self.slice_offsets()) {
            let half = d / 2;
            rotated.push(x.narrow(last, off + half, half)?.neg()?);
            rotated.push(x.narrow(last, off, half)?);
        }
        let rot = Tensor::cat(&rotated, last)?;
        Ok((x.broadcast_mul(cos)? + rot.broadcast_mul(sin)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::seeded_rng;
    use rand::Rng;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn origin_is_identity() {
        let rope = Rope3d::new([4, 6, 6], 10_000.0).unwrap();
        let v: Vec<f64> = (0..16).map(|i| i as f64 * 0.1 - 0.7).collect();
        let mut r = v.clone();
        rope.rotate(&mut r, [0, 0, 0]);
        assert_eq!(r, v);
    }

    #[test]
    fn preserves_norm() {
        let rope = Rope3d::new([4, 6, 6], 10_000.0).unwrap();
        let mut rng = seeded_rng(1);
        for _ in 0..100 {
            let v: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut r = v.clone();
            rope.rotate(&mut r, [rng.random_range(0..50), rng.random_range(0..50), rng.random_range(0..50)]);
            assert!((dot(&v, &v) - dot(&r, &r)).abs() < 1e-12);
        }
    }

    #[test]
    fn tensor_path_matches_scalar_path() {
        let rope = Rope3d::new([4, 6, 6], 10_000.0).unwrap();
        let coords = [[0, 0, 0], [1, 2, 3], [7, 0, 5]];
        let mut rng = seeded_rng(2);
        let vals: Vec<f64> = (0..48).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(vals.clone(), (3, 16), &Device::Cpu).unwrap();
        let (c, s) = rope.tables(&coords, DType::F64, &Device::Cpu).unwrap();
        let y = rope.apply(&x, &c, &s).unwrap().to_vec2::<f64>().unwrap();
        for (i, &coord) in coords.iter().enumerate() {
            let mut v = vals[i * 16..(i + 1) * 16].to_vec();
            rope.rotate(&mut v, coord);
            for (a, b) in v.iter().zip(&y[i]) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn odd_split_rejected() {
        assert!(Rope3d::new([3, 6, 7], 10_000.0).is_err());
    }
}
