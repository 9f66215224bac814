//! Clip records, quality gates, near-duplicate removal and tag balancing.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::videovae::VideoClip;

use super::signals::{clip_hash, hamming};

pub const SCORE_SHARPNESS: &str = "sharpness";
pub const SCORE_MOTION: &str = "motion";
pub const SCORE_AESTHETIC: &str = "aesthetic";
pub const SCORE_MLLM: &str = "mllm";

pub const REASON_BLURRY: &str = "blurry";
pub const REASON_OVERSHARP: &str = "oversharp";
pub const REASON_AESTHETIC: &str = "aesthetic";
pub const REASON_STATIC: &str = "static";
pub const REASON_DYNAMIC: &str = "dynamic";
pub const REASON_MLLM: &str = "mllm";
pub const REASON_DUPLICATE: &str = "duplicate";
pub const REASON_TOO_SHORT: &str = "too_short";

/// Maximum Hamming distance between concatenated clip hashes for two clips
/// to count as duplicates.
pub const DUPLICATE_DISTANCE: u32 = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum ClipStatus {
    Pending,
    Kept,
    Rejected { reasons: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub clip_id: String,
    pub source_id: String,
    /// Half-open frame range in the source clip.
    pub frames: (usize, usize),
    pub scores: BTreeMap<String, f64>,
    pub tags: Vec<String>,
    pub status: ClipStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

impl ClipRecord {
    pub fn new(source_id: &str, start: usize, end: usize) -> Result<Self> {
        if end <= start {
            return Err(Error::Input(format!("empty frame range [{start}, {end})")));
        }
        Ok(Self {
            clip_id: format!("{source_id}#{start}-{end}"),
            source_id: source_id.to_string(),
            frames: (start, end),
            scores: BTreeMap::new(),
            tags: Vec::new(),
            status: ClipStatus::Pending,
            weight: None,
        })
    }

    pub fn reject(&mut self, reason: &str) {
        match &mut self.status {
            ClipStatus::Rejected { reasons } => reasons.push(reason.to_string()),
            _ => {
                self.status = ClipStatus::Rejected {
                    reasons: vec![reason.to_string()],
                }
            }
        }
    }

    pub fn is_kept(&self) -> bool {
        self.status == ClipStatus::Kept
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range {
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterThresholds {
    /// Laplacian variance on the 8-bit scale.
    pub sharpness: Range,
    /// Mean block displacement in pixels per frame.
    pub motion: Range,
    pub aesthetic_min: f64,
    pub mllm_min: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        Self {
            sharpness: Range { low: 200.0, high: 2000.0 },
            motion: Range { low: 1.0, high: 20.0 },
            aesthetic_min: 4.5,
            mllm_min: 0.5,
        }
    }
}

impl FilterThresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("sharpness", self.sharpness), ("motion", self.motion)] {
            if !(r.low < r.high) {
                return Err(Error::Config(format!("{name} range needs low < high, got [{}, {}]", r.low, r.high)));
            }
        }
        Ok(())
    }
}

/// A learned clip scorer slot.
pub trait ClipScorer: Send + Sync {
    fn score(&self, clip: &VideoClip) -> Result<f64>;
}

/// Returns the same score for every clip.
#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer(pub f64);

impl ClipScorer for ConstantScorer {
    fn score(&self, _clip: &VideoClip) -> Result<f64> {
        Ok(self.0)
    }
}

/// Optional aesthetic and multimodal scorers. An absent scorer skips its gate.
#[derive(Default)]
pub struct Scorers {
    pub aesthetic: Option<Box<dyn ClipScorer>>,
    pub mllm: Option<Box<dyn ClipScorer>>,
}

impl Scorers {
    pub fn stubs() -> Self {
        Self {
            aesthetic: Some(Box::new(ConstantScorer(5.0))),
            mllm: Some(Box::new(ConstantScorer(1.0))),
        }
    }

    /// Adds the pluggable scores of `clip` to `record`.
    pub fn apply(&self, record: &mut ClipRecord, clip: &VideoClip) -> Result<()> {
        if let Some(s) = &self.aesthetic {
            record.scores.insert(SCORE_AESTHETIC.into(), s.score(clip)?);
        }
        if let Some(s) = &self.mllm {
            record.scores.insert(SCORE_MLLM.into(), s.score(clip)?);
        }
        Ok(())
    }
}

/// Resolves the record status. Gates run in the order sharpness, aesthetic,
/// motion, mllm and the first failure is the rejection reason. Aesthetic and
/// mllm gates only run when their score is present.
pub fn filter_clip(mut record: ClipRecord, thresholds: &FilterThresholds) -> Result<ClipRecord> {
    let get = |name: &str| -> Result<f64> {
        record
            .scores
            .get(name)
            .copied()
            .ok_or_else(|| Error::Pipeline(format!("clip {} has no {name} score", record.clip_id)))
    };
    let sharp = get(SCORE_SHARPNESS)?;
    let motion = get(SCORE_MOTION)?;
    let aesthetic = record.scores.get(SCORE_AESTHETIC).copied();
    let mllm = record.scores.get(SCORE_MLLM).copied();

    let failure = if sharp < thresholds.sharpness.low {
        Some(REASON_BLURRY)
    } else if sharp > thresholds.sharpness.high {
        Some(REASON_OVERSHARP)
    } else if aesthetic.is_some_and(|a| a < thresholds.aesthetic_min) {
        Some(REASON_AESTHETIC)
    } else if motion < thresholds.motion.low {
        Some(REASON_STATIC)
    } else if motion > thresholds.motion.high {
        Some(REASON_DYNAMIC)
    } else if mllm.is_some_and(|m| m < thresholds.mllm_min) {
        Some(REASON_MLLM)
    } else {
        None
    };
    match failure {
        Some(reason) => record.reject(reason),
        None => record.status = ClipStatus::Kept,
    }
    Ok(record)
}

/// Drops records whose clip hashes lie within [`DUPLICATE_DISTANCE`] of an
/// earlier surviving record.
pub fn dedup<F>(records: Vec<ClipRecord>, mut frames: F) -> Result<Vec<ClipRecord>>
where
    F: FnMut(&ClipRecord) -> Result<VideoClip>,
{
    let mut kept: Vec<([u64; 3], ClipRecord)> = Vec::new();
    for r in records {
        let h = clip_hash(&frames(&r)?);
        if kept.iter().all(|(k, _)| hamming(k, &h) > DUPLICATE_DISTANCE) {
            kept.push((h, r));
        }
    }
    Ok(kept.into_iter().map(|(_, r)| r).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TagWeights {
    pub weights: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Sampling weights proportional to the sum over a record's tags of
/// `target(tag) / count(tag)`, normalized to sum to one.
pub fn balance_tags(records: &[ClipRecord], target: &BTreeMap<String, f64>) -> Result<TagWeights> {
    if target.is_empty() {
        return Err(Error::Input("target tag distribution is empty".into()));
    }
    if let Some((t, v)) = target.iter().find(|(_, v)| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::Input(format!("target weight for `{t}` is {v}")));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        if r.tags.is_empty() {
            return Err(Error::Input(format!("clip {} has no tags", r.clip_id)));
        }
        let unique: BTreeSet<&str> = r.tags.iter().map(String::as_str).collect();
        for t in unique {
            if !target.contains_key(t) {
                return Err(Error::Input(format!("clip {} has tag `{t}` outside the target", r.clip_id)));
            }
            *counts.entry(t).or_default() += 1;
        }
    }
    let warnings = target
        .keys()
        .filter(|t| !counts.contains_key(t.as_str()))
        .map(|t| format!("target tag `{t}` has no clips"))
        .collect();
    let raw: Vec<f64> = records
        .iter()
        .map(|r| {
            let unique: BTreeSet<&str> = r.tags.iter().map(String::as_str).collect();
            unique.iter().map(|t| target[*t] / counts[t] as f64).sum()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Input("target gives every clip zero weight".into()));
    }
    Ok(TagWeights {
        weights: raw.iter().map(|w| w / total).collect(),
        warnings,
    })
}
