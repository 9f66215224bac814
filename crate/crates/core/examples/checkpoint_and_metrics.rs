//! Saves a model checkpoint, inspects its header, reloads it and scores two
//! clips with PSNR and SSIM.

use candle_core::DType;
use mugv::checkpoint::{load_checkpoint, read_header, save_checkpoint};
use mugv::dit::{DiT, DiTConfig};
use mugv::metrics::eval_metrics;
use mugv::videovae::moving_blob_clip;

fn main() -> mugv::Result<()> {
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("desk.ckpt");
    let mut ps = DiT::new(DiTConfig::desk(), DType::F32, 0)?.to_parameter_set()?;
    ps.metadata.insert("note".into(), "example".into());
    save_checkpoint(&ps, &path)?;

    let bytes = std::fs::read(&path)?;
    let (entries, metadata, payload_start) = read_header(&bytes)?;
    println!("{} tensors, payload at byte {payload_start}, metadata {metadata:?}", entries.len());
    for (name, e) in entries.iter().take(4) {
        println!("  {name:<36} {} {:?} @{}+{}", e.dtype, e.shape, e.offset, e.length);
    }
    let back = load_checkpoint(&path)?;
    println!("reload identical: {}", back == ps);

    let reference = moving_blob_clip(16, 32, 32, 0)?;
    for shift in [0, 1, 4] {
        let m = eval_metrics(&reference, &moving_blob_clip(16, 32, 32, shift)?)?;
        println!("shift {shift}px: PSNR {:.2} dB, SSIM {:.4}", m.psnr, m.ssim);
    }
    Ok(())
}
