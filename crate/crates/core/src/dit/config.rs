use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Spatial patch edge; tokens cover `2 × 2` latent sites.
pub const PATCH: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiTConfig {
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub text_dim: usize,
    /// Latent channels of the VAE the model operates on.
    pub c_z: usize,
    /// Per-head split `(d_t, d_h, d_w)` for the rotary embedding.
    pub rope_split: [usize; 3],
    pub rope_base: f64,
    /// Width of the sinusoidal embedding of global scalars.
    pub freq_dim: usize,
    pub mlp_ratio: usize,
}

impl DiTConfig {
    /// Small enough for finite-difference checks on one CPU core.
    pub fn desk() -> Self {
        Self {
            depth: 4,
            hidden: 64,
            heads: 4,
            head_dim: 16,
            text_dim: 32,
            c_z: 24,
            rope_split: rope_split_for(16, [2, 4, 4]),
            rope_base: 10_000.0,
            freq_dim: 32,
            mlp_ratio: 4,
        }
    }

    /// The 56-block layout before width expansion (hidden 1728).
    pub fn full_narrow() -> Self {
        Self {
            depth: 56,
            hidden: 1728,
            heads: 27,
            head_dim: 64,
            text_dim: 4096,
            c_z: 24,
            rope_split: [16, 24, 24],
            rope_base: 10_000.0,
            freq_dim: 256,
            mlp_ratio: 4,
        }
    }

    /// The expanded 56-block layout (hidden 3456 = 2 × 1728).
    pub fn full() -> Self {
        Self {
            hidden: 3456,
            heads: 54,
            ..Self::full_narrow()
        }
    }

    pub fn patch_dim(&self) -> usize {
        PATCH * PATCH * self.c_z
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.hidden
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth", self.depth),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("text_dim", self.text_dim),
            ("c_z", self.c_z),
            ("freq_dim", self.freq_dim),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.hidden != self.heads * self.head_dim {
            return Err(Error::Config(format!(
                "hidden {} != heads {} × head_dim {}",
                self.hidden, self.heads, self.head_dim
            )));
        }
        if self.freq_dim % 2 != 0 {
            return Err(Error::Config("freq_dim must be even".into()));
        }
        validate_rope_split(self.rope_split, self.head_dim)
    }
}

pub fn validate_rope_split(split: [usize; 3], head_dim: usize) -> Result<()> {
    if split.iter().any(|&d| d == 0 || d % 2 != 0) {
        return Err(Error::Config(format!("rope split {split:?} must be even and positive")));
    }
    if split.iter().sum::<usize>() != head_dim {
        return Err(Error::Config(format!("rope split {split:?} does not sum to head_dim {head_dim}")));
    }
    Ok(())
}

/// Splits `head_dim` across `(t, h, w)` in proportion to the grid extents,
/// each part even and at least 2. Rounding slack goes to the largest axis.
pub fn rope_split_for(head_dim: usize, extents: [usize; 3]) -> [usize; 3] {
    assert!(head_dim >= 6 && head_dim % 2 == 0, "head_dim must be even and >= 6");
    let total: usize = extents.iter().map(|&e| e.max(1)).sum();
    let mut split = extents.map(|e| {
        let share = head_dim as f64 * e.max(1) as f64 / total as f64;
        (((share / 2.0).round() as usize) * 2).max(2)
    });
    loop {
        let sum: usize = split.iter().sum();
        if sum == head_dim {
            break;
        }
        let largest = (0..3).max_by_key(|&i| (split[i], 3 - i)).expect("three axes");
        if sum > head_dim {
            split[largest] -= 2;
        } else {
            let smallest = (0..3).min_by_key(|&i| (split[i], i)).expect("three axes");
            split[smallest] += 2;
        }
    }
    split
}
