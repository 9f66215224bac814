//! Writes a small synthetic corpus to a temporary directory and runs the
//! curation pipeline over it: scene splitting, sharpness and motion gates,
//! duplicate removal and tag balancing.

use std::collections::BTreeMap;

use mugv::datapipe::{run_pipeline, ClipStatus, PipelineConfig};
use mugv::videovae::VideoClip;

fn texture(y: f64, x: f64) -> f32 {
    (0.35 * (x * 0.785).sin() + 0.35 * (y * 0.6).sin() + 0.1 * (x * 0.31 + y * 0.47).cos()) as f32
}

fn main() -> mugv::Result<()> {
    let tmp = tempfile::tempdir()?;
    let dir = tmp.path();
    // panning texture, then a hard cut to a flat frame
    VideoClip::from_fn(20, 3, 32, 32, 24.0, |t, _, y, x| {
        if t < 12 {
            texture(y as f64, x as f64 - 2.0 * t as f64)
        } else {
            -0.9
        }
    })?
    .write_raw(dir.join("a.f32"))?;
    // the same pan again, which should be caught as a duplicate
    VideoClip::from_fn(12, 3, 32, 32, 24.0, |t, _, y, x| texture(y as f64, x as f64 - 2.0 * t as f64))?
        .write_raw(dir.join("b.f32"))?;
    // a still texture, which fails the motion gate
    VideoClip::from_fn(12, 3, 32, 32, 24.0, |_, _, y, x| texture(y as f64 * 1.3, x as f64 * 0.7))?
        .write_raw(dir.join("c.f32"))?;

    let tags: BTreeMap<String, Vec<String>> = [("a".to_string(), vec!["pan".to_string()])].into();
    let config = PipelineConfig {
        tag_target: Some([("pan".to_string(), 1.0)].into()),
        ..PipelineConfig::default()
    };
    let manifest = run_pipeline(dir, &tags, &config)?;
    for r in &manifest.records {
        let status = match &r.status {
            ClipStatus::Kept => "kept".to_string(),
            ClipStatus::Rejected { reasons } => format!("rejected ({})", reasons.join(", ")),
            ClipStatus::Pending => "pending".to_string(),
        };
        println!("{:<10} {:<28} {:?}", r.clip_id, status, r.scores);
    }
    for w in &manifest.warnings {
        println!("warning: {w}");
    }
    Ok(())
}
