//! Briefly trains the desk transformer on moving squares, builds
//! reconstruction-vs-fresh preference pairs from it, then runs interleaved
//! DPO and KTO steps with an SFT anchor and merges the last checkpoints.

use candle_core::{DType, Tensor};
use mugv::dit::{DiT, DiTConfig, TextEncoder, DEFAULT_MAX_LEN, DEFAULT_VOCAB};
use mugv::flowtrain::{moving_square_latents, FlowBatch, FlowTrainer, MaskPolicy};
use mugv::params::seeded_rng;
use mugv::posttrain::{
    anneal_lr, merge_checkpoints, rdpo_pairs, FeedbackBatch, FeedbackKind, LabeledBatch, LrSchedule, PostTrainConfig,
    PostTrainer, PreferenceBatch,
};

fn main() -> mugv::Result<()> {
    let cfg = DiTConfig::desk();
    let (u, h, w) = (2, 4, 4);
    let encoder = TextEncoder::new(DEFAULT_VOCAB, DEFAULT_MAX_LEN, cfg.text_dim, DType::F32, &mut seeded_rng(1))?;
    let prompt = "a square moving right";

    let mut flow = FlowTrainer::new(DiT::new(cfg.clone(), DType::F32, 0)?, 2e-3, 0.0, 0)?;
    let cond8 = encoder.condition(&[prompt; 8], 24.0)?;
    for step in 0..100 {
        let lat = moving_square_latents(8, u, h, w, cfg.c_z, step)?;
        let b = FlowBatch::draw(lat, cond8.clone(), flow.rng())?;
        flow.train_step(&b, &MaskPolicy::NONE, 2e-3)?;
    }

    let n = 8;
    let real = moving_square_latents(n, u, h, w, cfg.c_z, 500)?;
    let cond = encoder.condition(&vec![prompt; n], 24.0)?;
    let pairs = rdpo_pairs(&flow.model, &real, &cond, 8, 501)?;
    let winners = Tensor::stack(&pairs.iter().map(|p| &p.winner).collect::<Vec<_>>(), 0)?;
    let losers = Tensor::stack(&pairs.iter().map(|p| &p.loser).collect::<Vec<_>>(), 0)?;
    println!("built {} preference pairs", pairs.len());

    let config = PostTrainConfig {
        alpha_sft: 0.5,
        ..PostTrainConfig::default()
    };
    let mut post = PostTrainer::new(flow.model, config, 1e-4)?;
    let schedule = LrSchedule {
        lr_start: 1e-4,
        lr_end: 1e-5,
        horizon: 8,
    };
    let mut rng = seeded_rng(7);
    let cond2n = encoder.condition(&vec![prompt; 2 * n], 24.0)?;
    let mut snapshots = Vec::new();
    for step in 0..8 {
        let batch = match post.expected_kind() {
            FeedbackKind::Dpo => FeedbackBatch::Dpo(PreferenceBatch::new(winners.clone(), losers.clone(), cond.clone(), &mut rng)?),
            FeedbackKind::Kto => {
                let samples = Tensor::cat(&[&winners, &losers], 0)?;
                let labels = (0..2 * n).map(|i| i < n).collect();
                FeedbackBatch::Kto(LabeledBatch::new(samples, labels, cond2n.clone(), &mut rng)?)
            }
        };
        let sft = FlowBatch::draw(real.clone(), cond.clone(), &mut rng)?;
        let m = post.step(&batch, Some(&sft), anneal_lr(step, &schedule))?;
        println!(
            "step {} {:?}: preference {:.4}  sft {:.4}  lr {:.2e}",
            m.step, m.kind, m.preference_loss, m.sft_loss, m.lr
        );
        snapshots.push(post.model.to_parameter_set()?);
    }
    let merged = merge_checkpoints(&snapshots[snapshots.len() - 3..], post.config.gamma_merge)?;
    println!("merged last 3 checkpoints into {} tensors", merged.len());
    Ok(())
}
