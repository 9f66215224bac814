//! Synthetic latent-space data: a bright square drifting across a flat background.

use candle_core::{Device, Tensor};
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::seeded_rng;

/// `(B, U, h, w, C)` latents. The 2 × 2 square moves one site right per unit
/// (wrapping) from a per-sample random start; its channels alternate ±1 over
/// a background of −0.5.
pub fn moving_square_latents(batch: usize, units: usize, h: usize, w: usize, c: usize, seed: u64) -> Result<Tensor> {
    if h < 2 || w < 2 || c == 0 || units == 0 || batch == 0 {
        return Err(Error::Input(format!("moving square needs h, w ≥ 2 and positive sizes, got {batch}×{units}×{h}×{w}×{c}")));
    }
    let mut rng = seeded_rng(seed);
    let mut v = vec![-0.5f32; batch * units * h * w * c];
    for b in 0..batch {
        let y0 = rng.random_range(0..h - 1);
        let x0 = rng.random_range(0..w);
        for u in 0..units {
            for dy in 0..2 {
                for dx in 0..2 {
                    let y = y0 + dy;
                    let x = (x0 + u + dx) % w;
                    for ch in 0..c {
                        let i = (((b * units + u) * h + y) * w + x) * c + ch;
                        v[i] = if ch % 2 == 0 { 1.0 } else { -1.0 };
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(v, (batch, units, h, w, c), &Device::Cpu)?)
}
