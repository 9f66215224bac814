use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    /// Frame edge in pixels.
    pub resolution: usize,
    /// Frames per clip.
    pub frames: usize,
    pub first_frame_mask_prob: f64,
}

/// Three-stage schedule. Stage `k` covers steps up to `boundaries[k]`
/// (exclusive); later steps stay in the last stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumConfig {
    pub boundaries: [usize; 3],
    pub stages: [StageSpec; 3],
    pub image_ratio_start: f64,
    pub image_ratio_end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageDescriptor {
    /// 1-based stage number.
    pub stage: usize,
    pub resolution: usize,
    pub frames: usize,
    pub image_ratio: f64,
    pub first_frame_mask_prob: f64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            boundaries: [200, 400, 600],
            stages: [
                StageSpec {
                    resolution: 16,
                    frames: 8,
                    first_frame_mask_prob: 0.0,
                },
                StageSpec {
                    resolution: 16,
                    frames: 16,
                    first_frame_mask_prob: 0.25,
                },
                StageSpec {
                    resolution: 32,
                    frames: 16,
                    first_frame_mask_prob: 0.25,
                },
            ],
            image_ratio_start: 0.75,
            image_ratio_end: 0.1,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        let b = self.boundaries;
        if b[0] == 0 || b[0] >= b[1] || b[1] >= b[2] {
            return Err(Error::Config(format!("stage boundaries {b:?} must be positive and increasing")));
        }
        for r in [self.image_ratio_start, self.image_ratio_end] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("image ratio {r} outside [0, 1]")));
            }
        }
        if self.image_ratio_end > self.image_ratio_start {
            return Err(Error::Config("image ratio must not increase".into()));
        }
        let [s1, s2, s3] = self.stages;
        if s1.first_frame_mask_prob != 0.0 {
            return Err(Error::Config("stage 1 must not use first-frame masking".into()));
        }
        for s in [s2, s3] {
            if !(s.first_frame_mask_prob > 0.0 && s.first_frame_mask_prob <= 1.0) {
                return Err(Error::Config("stages 2 and 3 need a first-frame mask probability in (0, 1]".into()));
            }
        }
        for w in self.stages.windows(2) {
            if w[1].resolution < w[0].resolution || w[1].frames < w[0].frames {
                return Err(Error::Config("resolution and clip length must not decrease across stages".into()));
            }
        }
        if self.stages.iter().any(|s| s.resolution == 0 || s.frames == 0) {
            return Err(Error::Config("stage resolution and frames must be positive".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.boundaries[2]
    }
}

pub fn curriculum_schedule(step: usize, config: &CurriculumConfig) -> StageDescriptor {
    let idx = config.boundaries.iter().position(|&b| step < b).unwrap_or(2);
    let stage = config.stages[idx];
    let image_ratio = if idx == 0 {
        let frac = step as f64 / config.boundaries[0] as f64;
        config.image_ratio_start + (config.image_ratio_end - config.image_ratio_start) * frac
    } else {
        config.image_ratio_end
    };
    StageDescriptor {
        stage: idx + 1,
        resolution: stage.resolution,
        frames: stage.frames,
        image_ratio,
        first_frame_mask_prob: stage.first_frame_mask_prob,
    }
}
