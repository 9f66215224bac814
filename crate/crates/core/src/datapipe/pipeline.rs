//! Directory-to-manifest curation run.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::videovae::VideoClip;

use super::filter::{
    balance_tags, dedup, filter_clip, ClipRecord, FilterThresholds, Scorers, REASON_DUPLICATE, REASON_TOO_SHORT,
    SCORE_MOTION, SCORE_SHARPNESS,
};
use super::signals::{clip_sharpness, detect_scenes, motion_amplitude, scene_ranges, DEFAULT_SCENE_THRESHOLD, MIN_MOTION_FRAMES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub thresholds: FilterThresholds,
    pub scene_threshold: f64,
    /// Plug the constant stand-ins into the aesthetic and mllm slots.
    pub stub_scorers: bool,
    /// Target tag distribution; balancing runs only when present.
    pub tag_target: Option<BTreeMap<String, f64>>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            thresholds: FilterThresholds::default(),
            scene_threshold: DEFAULT_SCENE_THRESHOLD,
            stub_scorers: true,
            tag_target: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<ClipRecord>,
    pub warnings: Vec<String>,
}

impl Manifest {
    pub fn kept(&self) -> impl Iterator<Item = &ClipRecord> {
        self.records.iter().filter(|r| r.is_kept())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<ClipRecord>> {
        fs::read_to_string(path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }
}

/// Raw clip files (`*.f32` with JSON sidecars) in `dir`, sorted by name.
pub fn list_clips(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "f32"))
        .collect();
    paths.sort();
    Ok(paths)
}

fn source_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Splits, scores and gates one source clip.
pub fn process_clip(
    source: &str,
    clip: &VideoClip,
    tags: &[String],
    config: &PipelineConfig,
    scorers: &Scorers,
) -> Result<Vec<ClipRecord>> {
    let cuts = detect_scenes(clip, config.scene_threshold);
    let mut out = Vec::new();
    for (start, end) in scene_ranges(clip.frames(), &cuts) {
        let mut rec = ClipRecord::new(source, start, end)?;
        rec.tags = tags.to_vec();
        if end - start < MIN_MOTION_FRAMES {
            rec.reject(REASON_TOO_SHORT);
            out.push(rec);
            continue;
        }
        let seg = clip.slice_frames(start, end)?;
        rec.scores.insert(SCORE_SHARPNESS.into(), clip_sharpness(&seg)?);
        rec.scores.insert(SCORE_MOTION.into(), motion_amplitude(&seg)?);
        scorers.apply(&mut rec, &seg)?;
        out.push(filter_clip(rec, &config.thresholds)?);
    }
    Ok(out)
}

/// Curates every clip in `dir`. `tags` maps source ids (file stems) to tags.
/// Output order follows file name and frame order, independent of the
/// number of worker threads.
pub fn run_pipeline(dir: &Path, tags: &BTreeMap<String, Vec<String>>, config: &PipelineConfig) -> Result<Manifest> {
    config.thresholds.validate()?;
    let scorers = if config.stub_scorers { Scorers::stubs() } else { Scorers::default() };
    let paths = list_clips(dir)?;
    if paths.is_empty() {
        return Err(Error::Input(format!("no .f32 clips in {}", dir.display())));
    }
    let per_source: Vec<(PathBuf, Vec<ClipRecord>)> = paths
        .par_iter()
        .map(|p| {
            let id = source_id(p);
            let clip = VideoClip::read_raw(p)?;
            let t = tags.get(&id).cloned().unwrap_or_default();
            Ok((p.clone(), process_clip(&id, &clip, &t, config, &scorers)?))
        })
        .collect::<Result<_>>()?;

    let sources: BTreeMap<String, PathBuf> = per_source.iter().map(|(p, _)| (source_id(p), p.clone())).collect();
    let mut records: Vec<ClipRecord> = per_source.into_iter().flat_map(|(_, r)| r).collect();

    let kept: Vec<ClipRecord> = records.iter().filter(|r| r.is_kept()).cloned().collect();
    let survivors = dedup(kept, |r| {
        VideoClip::read_raw(&sources[&r.source_id])?.slice_frames(r.frames.0, r.frames.1)
    })?;
    let survivor_ids: std::collections::BTreeSet<&str> = survivors.iter().map(|r| r.clip_id.as_str()).collect();
    for r in records.iter_mut().filter(|r| r.is_kept()) {
        if !survivor_ids.contains(r.clip_id.as_str()) {
            r.reject(REASON_DUPLICATE);
        }
    }

    let mut warnings = Vec::new();
    if let Some(target) = &config.tag_target {
        let kept: Vec<ClipRecord> = records.iter().filter(|r| r.is_kept()).cloned().collect();
        if !kept.is_empty() {
            let w = balance_tags(&kept, target)?;
            warnings = w.warnings;
            let mut it = w.weights.into_iter();
            for r in records.iter_mut().filter(|r| r.is_kept()) {
                r.weight = it.next();
            }
        }
    }
    Ok(Manifest { records, warnings })
}
