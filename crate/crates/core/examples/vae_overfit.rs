//! Overfits the desk video autoencoder to one synthetic clip and reports
//! reconstruction quality along the way.
//!
//! cargo run --example vae_overfit -- [steps] [lr_start] [lr_end]

use candle_core::DType;
use mugv::metrics::eval_metrics;
use mugv::posttrain::{anneal_lr, LrSchedule};
use mugv::videovae::{moving_blob_clip, VaeArch, VaeConfig, VaeTrainer, VideoClip, VideoVae};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> mugv::Result<()> {
    let steps: usize = arg(1, 300);
    let schedule = LrSchedule {
        lr_start: arg(2, 3e-3),
        lr_end: arg(3, 1e-4),
        horizon: steps,
    };
    let clip = moving_blob_clip(16, 32, 32, 0)?;
    let x = clip.to_tensor(DType::F32)?;
    let vae = VideoVae::new(VaeArch::default(), DType::F32, 0)?;
    let mut trainer = VaeTrainer::new(vae, VaeConfig::default(), schedule.lr_start, 0)?;
    let start = std::time::Instant::now();
    for step in 0..steps {
        trainer.set_learning_rate(anneal_lr(step, &schedule));
        let m = trainer.train_step(&x)?;
        if step % 50 == 0 || step + 1 == steps {
            let recon = VideoClip::from_tensor(&trainer.reconstruct(&x)?.clamp(-1f32, 1f32)?, clip.fps)?;
            let e = eval_metrics(&clip, &recon)?;
            println!(
                "step {step:4}  loss {:.4}  kl {:.3e}  psnr {:.2} dB  ssim {:.4}  {:.0}s",
                m.loss.total,
                m.loss.kl,
                e.psnr,
                e.ssim,
                start.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
