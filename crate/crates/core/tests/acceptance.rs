//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the report prints in order.

use std::collections::BTreeMap;
use std::fs;
use std::process::Command;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::Rng;

use mugv::checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes, CheckpointError};
use mugv::datapipe::{
    clip_sharpness, dedup, detect_scenes, filter_clip, motion_amplitude, run_pipeline, sharpness_score, ClipRecord,
    ClipStatus, FilterThresholds, PipelineConfig, DEFAULT_SCENE_THRESHOLD, SCORE_AESTHETIC, SCORE_MOTION,
    SCORE_SHARPNESS,
};
use mugv::dit::{DiT, DiTConfig, Rope3d, TextEncoder, DEFAULT_MAX_LEN, DEFAULT_VOCAB};
use mugv::expansion::{expand_dit, expand_linear, random_dit_inputs, verify_preservation, BiasMode, ExpansionConfig, LinearLayer};
use mugv::flowtrain::{
    flow_batch_loss, invert, moving_square_latents, sample, sample_from, ConditionMask, FlowBatch, FlowTrainer,
    MaskPolicy, VelocityModel,
};
use mugv::infra::{balance_batches, bubble_fraction, composed_modulate, fused_modulate, optimal_makespan, simulate_pipeline};
use mugv::metrics::eval_metrics;
use mugv::params::{randn, seeded_rng, NamedTensor, ParamStore, ParameterSet};
use mugv::posttrain::{
    anneal_lr, dpo_from_errors, dpo_loss, flow_errors, kto_from_errors, kto_loss, merge_weights, rdpo_pairs, FeedbackBatch, LabeledBatch, LrSchedule,
    PostTrainConfig, PostTrainer, PreferenceBatch,
};
use mugv::videovae::{kl_divergence, moving_blob_clip, vae_total_loss, VaeArch, VaeConfig, VaeTrainer, VideoClip, VideoVae};
use mugv::Result;

type Outcome = Result<(bool, String)>;

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn flat32(t: &Tensor) -> Vec<f32> {
    t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
}

// 1 --------------------------------------------------------------------------

fn chunk_independence() -> Outcome {
    let vae = VideoVae::new(VaeArch::default(), DType::F32, 0)?;
    let mut rng = seeded_rng(10);
    let base: Vec<f32> = (0..32 * 3 * 32 * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
    let clip = Tensor::from_vec(base.clone(), (32, 3, 32, 32), &Device::Cpu)?;
    let (mean0, logvar0) = vae.encode_tensor(&clip)?;
    let units = mean0.dims()[0];
    let mut ok = units == 4;
    let mut changed_own = 0;
    for k in 0..4 {
        let mut v = base.clone();
        let per_frame = 3 * 32 * 32;
        for x in &mut v[k * 8 * per_frame..(k + 1) * 8 * per_frame] {
            *x = rng.random_range(-1.0..1.0);
        }
        let (mean, logvar) = vae.encode_tensor(&Tensor::from_vec(v, (32, 3, 32, 32), &Device::Cpu)?)?;
        for u in 0..units {
            let same = flat32(&mean.get(u)?) == flat32(&mean0.get(u)?) && flat32(&logvar.get(u)?) == flat32(&logvar0.get(u)?);
            if u == k {
                changed_own += usize::from(!same);
            } else {
                ok &= same;
            }
        }
    }
    ok &= changed_own == 4;
    Ok((ok, format!("{units} units; other units bit-identical under each chunk perturbation, own unit changed {changed_own}/4")))
}

// 2 --------------------------------------------------------------------------

fn expansion_preservation() -> Outcome {
    let model = DiT::new(DiTConfig::desk(), DType::F32, 3)?;
    let cfg = ExpansionConfig::new(2, 1e-3, BiasMode::PreserveFunction, 4)?;
    let wide = expand_dit(&model, &cfg)?;
    let inputs = random_dit_inputs(&model.config, 16, DType::F32, 5)?;
    let report = verify_preservation(&model, &wide, &inputs, 1e-5)?;
    let ratio = report.param_ratio();
    let ok = report.passed && (3.6..=4.0).contains(&ratio);
    Ok((ok, format!("max deviation {:.3e} (tol 1e-5), parameter ratio {ratio:.4}", report.global_max_deviation)))
}

// 3 --------------------------------------------------------------------------

fn literal_bias_deviation() -> Outcome {
    let mut rng = seeded_rng(6);
    let (d_out, d_in) = (6, 5);
    let w = randn(&mut rng, &[d_out, d_in], DType::F64, &Device::Cpu)?;
    let b = randn(&mut rng, &[d_out], DType::F64, &Device::Cpu)?;
    let cfg = ExpansionConfig::new(2, 1e-3, BiasMode::LiteralEq2, 7)?;
    let (w2, b2) = expand_linear(&flat(&w), d_out, d_in, Some(&flat(&b)), &cfg, &mut rng)?;
    let narrow = LinearLayer {
        weight: w,
        bias: b.clone(),
        input_copies: 1,
    };
    let wide = LinearLayer {
        weight: Tensor::from_vec(w2, (2 * d_out, 2 * d_in), &Device::Cpu)?,
        bias: Tensor::from_vec(b2.expect("bias"), 2 * d_out, &Device::Cpu)?,
        input_copies: 2,
    };
    let x = randn(&mut rng, &[32, d_in], DType::F64, &Device::Cpu)?;
    let report = verify_preservation(&narrow, &wide, &[x], 0.0)?;
    let expected = flat(&b).iter().fold(0f64, |m, v| m.max(v.abs())) / 2.0;
    let gap = (report.global_max_deviation - expected).abs();
    Ok((gap <= 1e-7, format!("deviation {:.9} vs ‖b‖∞/2 = {expected:.9} (|diff| {gap:.2e})", report.global_max_deviation)))
}

// 4 --------------------------------------------------------------------------

fn rope_checks() -> Outcome {
    let cfg = DiTConfig::desk();
    let rope = Rope3d::new(cfg.rope_split, cfg.rope_base)?;
    let hd = rope.head_dim();
    let mut rng = seeded_rng(11);
    let mut worst_shift = 0f64;
    for _ in 0..1000 {
        let q = randn(&mut rng, &[1, hd], DType::F64, &Device::Cpu)?;
        let k = randn(&mut rng, &[1, hd], DType::F64, &Device::Cpu)?;
        let pq: [usize; 3] = std::array::from_fn(|_| rng.random_range(0..32));
        let pk: [usize; 3] = std::array::from_fn(|_| rng.random_range(0..32));
        let s: [usize; 3] = std::array::from_fn(|_| rng.random_range(0..64));
        let logit = |a: [usize; 3], b: [usize; 3]| -> Result<f64> {
            let (cos, sin) = rope.tables(&[a, b], DType::F64, &Device::Cpu)?;
            let both = Tensor::cat(&[&q, &k], 0)?;
            let r = rope.apply(&both, &cos, &sin)?;
            Ok(scalar(&(r.get(0)? * r.get(1)?)?.sum_all()?))
        };
        let base = logit(pq, pk)?;
        let moved = logit(std::array::from_fn(|i| pq[i] + s[i]), std::array::from_fn(|i| pk[i] + s[i]))?;
        worst_shift = worst_shift.max((base - moved).abs());
    }

    // axis-aligned positions against a textbook single-axis rotary embedding
    let oracle = |v: &[f64], pos: usize, d: usize| -> Vec<f64> {
        let half = d / 2;
        let mut out = v.to_vec();
        for i in 0..half {
            let theta = pos as f64 / cfg.rope_base.powf(2.0 * i as f64 / d as f64);
            out[i] = v[i] * theta.cos() - v[i + half] * theta.sin();
            out[i + half] = v[i + half] * theta.cos() + v[i] * theta.sin();
        }
        out
    };
    let mut worst_oracle = 0f64;
    let offsets = [0, cfg.rope_split[0], cfg.rope_split[0] + cfg.rope_split[1]];
    for _ in 0..300 {
        let v: Vec<f64> = (0..hd).map(|_| rng.random_range(-1.0..1.0)).collect();
        let axis = rng.random_range(0..3);
        let pos = rng.random_range(0..64);
        let mut coord = [0; 3];
        coord[axis] = pos;
        let mut got = v.clone();
        rope.rotate(&mut got, coord);
        let (cos, sin) = rope.tables(&[coord], DType::F64, &Device::Cpu)?;
        let via_tensor = flat(&rope.apply(&Tensor::from_vec(v.clone(), (1, hd), &Device::Cpu)?, &cos, &sin)?);
        let mut want = v.clone();
        let (off, d) = (offsets[axis], cfg.rope_split[axis]);
        want[off..off + d].copy_from_slice(&oracle(&v[off..off + d], pos, d));
        for i in 0..hd {
            worst_oracle = worst_oracle.max((got[i] - want[i]).abs()).max((via_tensor[i] - want[i]).abs());
        }
    }
    let ok = worst_shift <= 1e-5 && worst_oracle <= 1e-6;
    Ok((ok, format!("shift invariance max |Δlogit| {worst_shift:.2e} over 1000 draws; 1D oracle max error {worst_oracle:.2e}")))
}

// 5 --------------------------------------------------------------------------

/// Largest relative error of a five-point central difference against the
/// autograd gradient, over the highest-gradient entry and two random entries
/// of every tensor in `store`. Relative errors use a denominator of at least
/// 1e-6.
///
/// The losses are piecewise smooth (L1 terms, leaky ReLU), so a step can
/// straddle a kink. The step starts at 2e-5 and shrinks 4× until two
/// successive estimates agree to 1e-4 relative plus 1e-9 absolute roundoff,
/// at most three times. The larger step of the agreeing pair is used.
fn fd_max_rel_err<F: Fn() -> Result<Tensor>>(store: &ParamStore, loss: F, seed: u64) -> Result<(f64, usize, String)> {
    let grads = loss()?.backward()?;
    let mut rng = seeded_rng(seed);
    let mut worst = (0f64, String::new());
    let mut probes = 0;
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let var = store.var(&name).expect("listed name");
        let Some(g) = grads.get(var.as_tensor()) else { continue };
        let g = flat(g);
        let base = flat(var.as_tensor());
        let dims = var.as_tensor().dims().to_vec();
        let top = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap_or(0);
        let picks = [top, rng.random_range(0..g.len()), rng.random_range(0..g.len())];
        for idx in picks {
            let eval = |delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v[idx] += delta;
                store.set(&name, &Tensor::from_vec(v, dims.as_slice(), &Device::Cpu)?)?;
                Ok(scalar(&loss()?))
            };
            let five_point = |h: f64| -> Result<f64> { Ok((8.0 * (eval(h)? - eval(-h)?) - (eval(2.0 * h)? - eval(-2.0 * h)?)) / (12.0 * h)) };
            let mut h = 2e-5;
            let mut fd = five_point(h)?;
            for _ in 0..3 {
                h /= 4.0;
                let next = five_point(h)?;
                if (next - fd).abs() <= 1e-4 * next.abs().max(fd.abs()) + 1e-9 {
                    break;
                }
                fd = next;
            }
            store.set(&name, &Tensor::from_vec(base.clone(), dims.as_slice(), &Device::Cpu)?)?;
            let rel = (fd - g[idx]).abs() / fd.abs().max(g[idx].abs()).max(1e-6);
            probes += 1;
            if std::env::var_os("MUGV_FD_TRACE").is_some() && rel > 1e-4 {
                eprintln!("  {name}[{idx}] fd {fd:.6e} grad {:.6e} rel {rel:.2e}", g[idx]);
            }
            if rel > worst.0 {
                worst = (rel, format!("{name}[{idx}]"));
            }
        }
    }
    Ok((worst.0, probes, worst.1))
}

fn desk_cond(encoder: &TextEncoder, n: usize) -> Result<mugv::dit::Conditioning> {
    encoder.condition(&vec!["a square moving right"; n], 24.0)
}

fn gradient_suite() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    let mut record = |what: &str, r: (f64, usize, String)| {
        ok &= r.0 <= 1e-3;
        lines.push(format!("{what} {:.1e} ({} probes)", r.0, r.1));
    };

    // VAE objective with saliency weighting, KL and the adversarial term
    let vae = VideoVae::new(VaeArch::default(), DType::F64, 1)?;
    let clip = moving_blob_clip(16, 16, 16, 2)?.to_tensor(DType::F64)?;
    let vcfg = VaeConfig {
        lambda_kl: 0.1,
        gamma_gan: 0.1,
        gan_enabled: true,
        adaptive_weighting: true,
        ..VaeConfig::default()
    };
    let (m0, _) = vae.encode_tensor(&clip)?;
    let eps = randn(&mut seeded_rng(2), m0.dims(), DType::F64, &Device::Cpu)?;
    let vae_loss = || -> Result<Tensor> {
        let (mean, logvar) = vae.encode_tensor(&clip)?;
        let z = (&mean + (logvar.affine(0.5, 0.0)?.exp()? * &eps)?)?;
        let recon = vae.decode_tensor(&z, 1)?;
        let scores = vae.critic(&recon)?;
        Ok(vae_total_loss(&clip, &recon, &mean, &logvar, Some(&scores), &vcfg)?.total)
    };
    record("vae_total_loss", fd_max_rel_err(&vae.params, vae_loss, 3)?);

    let cfg = DiTConfig::desk();
    let encoder = TextEncoder::new(DEFAULT_VOCAB, DEFAULT_MAX_LEN, cfg.text_dim, DType::F64, &mut seeded_rng(4))?;
    let model = DiT::new(cfg.clone(), DType::F64, 5)?;
    let reference = DiT::new(cfg.clone(), DType::F64, 6)?;
    let mut rng = seeded_rng(7);
    let lat = moving_square_latents(2, 2, 4, 4, cfg.c_z, 8)?.to_dtype(DType::F64)?;
    let other = randn(&mut rng, lat.dims(), DType::F64, &Device::Cpu)?;

    let fb = FlowBatch::draw(lat.clone(), desk_cond(&encoder, 2)?, &mut rng)?;
    let mask = ConditionMask::first_units(&[true, false], 1, &lat)?;
    record("flow_loss", fd_max_rel_err(&model.params, || flow_batch_loss(&model, &fb, &mask), 9)?);

    let pref = PreferenceBatch::new(lat.clone(), other.clone(), desk_cond(&encoder, 2)?, &mut rng)?;
    record("dpo_loss", fd_max_rel_err(&model.params, || dpo_loss(&model, &reference, &pref, 1.0), 10)?);

    let post = PostTrainConfig {
        w_desirable: 1.0,
        w_undesirable: 1.5,
        ..PostTrainConfig::default()
    };
    let lab = LabeledBatch::new(Tensor::cat(&[&lat, &other], 0)?, vec![true, true, false, false], desk_cond(&encoder, 4)?, &mut rng)?;
    // The KTO baseline is a stop-gradient batch statistic. Autograd treats it
    // as a constant, so the finite differences hold it at its base-point value.
    let e_ref = flow_errors(&reference, &lab.samples, &lab.cond, &lab.t, &lab.noise)?.detach();
    let e0 = flow_errors(&model, &lab.samples, &lab.cond, &lab.t, &lab.noise)?;
    let z0 = post.beta * scalar(&(&e_ref - &e0)?.mean_all()?);
    let kto_fixed = || -> Result<Tensor> {
        let e = flow_errors(&model, &lab.samples, &lab.cond, &lab.t, &lab.noise)?;
        kto_from_errors(&e, &e_ref, &lab.desirable, post.beta, (post.w_desirable, post.w_undesirable), Some(z0))
    };
    let same_value = (scalar(&kto_fixed()?) - scalar(&kto_loss(&model, &reference, &lab, &post)?)).abs();
    record("kto_loss", fd_max_rel_err(&model.params, kto_fixed, 11)?);

    let trainer = PostTrainer::with_reference(model, reference, PostTrainConfig { alpha_sft: 0.5, ..post }, 1e-3)?;
    let dpo = FeedbackBatch::Dpo(pref);
    record(
        "combined post loss",
        fd_max_rel_err(&trainer.model.params, || Ok(trainer.losses(&dpo, Some(&fb))?.0), 12)?,
    );
    lines.push(format!("fixed-baseline KTO equals kto_loss to {same_value:.1e}"));
    Ok((ok && same_value <= 1e-12, lines.join("; ")))
}

// 6 --------------------------------------------------------------------------

fn closed_forms() -> Outcome {
    let kl = scalar(&kl_divergence(&Tensor::ones((3, 4), DType::F64, &Device::Cpu)?, &Tensor::zeros((3, 4), DType::F64, &Device::Cpu)?)?);

    let cfg = DiTConfig::desk();
    let model = DiT::new(cfg.clone(), DType::F64, 1)?;
    let twin = DiT::from_parameter_set(&model.to_parameter_set()?, DType::F64)?;
    let encoder = TextEncoder::new(DEFAULT_VOCAB, DEFAULT_MAX_LEN, cfg.text_dim, DType::F64, &mut seeded_rng(2))?;
    let mut rng = seeded_rng(3);
    let lat = moving_square_latents(3, 2, 4, 4, cfg.c_z, 4)?.to_dtype(DType::F64)?;
    let other = randn(&mut rng, lat.dims(), DType::F64, &Device::Cpu)?;
    let pref = PreferenceBatch::new(lat.clone(), other.clone(), desk_cond(&encoder, 3)?, &mut rng)?;
    let dpo_ref = scalar(&dpo_loss(&model, &twin, &pref, 1.0)?);

    let s = |v: f64| Tensor::new(&[v], &Device::Cpu).unwrap();
    // margin (0.5 - 0.1) - (0.5 - 0.9) = 0.8
    let dpo_scalar = scalar(&dpo_from_errors(&s(0.1), &s(0.9), &s(0.5), &s(0.5), 1.0)?);
    let want_scalar = (1.0 + (-0.8f64).exp()).ln();

    let post = PostTrainConfig {
        w_desirable: 1.0,
        w_undesirable: 2.0,
        ..PostTrainConfig::default()
    };
    let labels = vec![true, false, false, true, false, true];
    let mean_w = labels.iter().map(|&d| if d { 1.0 } else { 2.0 }).sum::<f64>() / labels.len() as f64;
    let lab = LabeledBatch::new(Tensor::cat(&[&lat, &other], 0)?, labels, desk_cond(&encoder, 6)?, &mut rng)?;
    let kto_ref = scalar(&kto_loss(&model, &twin, &lab, &post)?);

    let w = merge_weights(2, 0.5)?;

    let checks = [
        ((kl - 0.5).abs() <= 1e-9, format!("KL {kl:.12}")),
        ((dpo_ref - 2f64.ln()).abs() <= 1e-6, format!("DPO@ref {dpo_ref:.9}")),
        ((dpo_scalar - want_scalar).abs() <= 1e-6, format!("DPO scalar {dpo_scalar:.9} vs {want_scalar:.9}")),
        ((kto_ref - mean_w / 2.0).abs() <= 1e-6, format!("KTO@ref {kto_ref:.9} vs {:.9}", mean_w / 2.0)),
        ((w[0] - 1.0 / 3.0).abs() <= 1e-12 && (w[1] - 2.0 / 3.0).abs() <= 1e-12, format!("merge {:?}", w)),
    ];
    Ok((checks.iter().all(|c| c.0), checks.iter().map(|c| c.1.clone()).collect::<Vec<_>>().join(", ")))
}

// 7 and 8 share one trained transformer -------------------------------------

/// Budget that takes the desk autoencoder past 30 dB on the synthetic clip:
/// cosine decay from `VAE_LR.0` to `VAE_LR.1` over `VAE_STEPS`.
const VAE_STEPS: usize = 300;
const VAE_LR: (f64, f64) = (3e-3, 1e-4);
const DIT_STEPS: usize = 200;
const DIT_LR: f64 = 2e-3;
const DIT_BATCH: usize = 8;
const GRID: (usize, usize, usize) = (2, 4, 4);

struct Trained {
    model: DiT,
    encoder: TextEncoder,
    initial_eval: f64,
    final_eval: f64,
}

/// One fixed batch: latents, timesteps and noise are drawn once and reused.
fn fixed_batch(cfg: &DiTConfig, encoder: &TextEncoder) -> Result<FlowBatch> {
    let (u, h, w) = GRID;
    let latents = moving_square_latents(DIT_BATCH, u, h, w, cfg.c_z, 999)?;
    FlowBatch::draw(latents, desk_cond(encoder, DIT_BATCH)?, &mut seeded_rng(998))
}

fn train_desk_dit() -> Result<Trained> {
    let cfg = DiTConfig::desk();
    let (u, h, w) = GRID;
    let encoder = TextEncoder::new(DEFAULT_VOCAB, DEFAULT_MAX_LEN, cfg.text_dim, DType::F32, &mut seeded_rng(1))?;
    let batch = fixed_batch(&cfg, &encoder)?;
    let none = ConditionMask::none(batch.batch(), [u, h / 2, w / 2]);
    let mut trainer = FlowTrainer::new(DiT::new(cfg.clone(), DType::F32, 0)?, DIT_LR, 0.0, 0)?;
    let initial_eval = scalar(&flow_batch_loss(&trainer.model, &batch, &none)?);
    let policy = MaskPolicy::NONE;
    for _ in 0..DIT_STEPS {
        trainer.train_step(&batch, &policy, DIT_LR)?;
    }
    let final_eval = scalar(&flow_batch_loss(&trainer.model, &batch, &none)?);
    Ok(Trained {
        model: trainer.model,
        encoder,
        initial_eval,
        final_eval,
    })
}

fn overfit_smoke(trained: &Trained) -> Outcome {
    let clip = moving_blob_clip(16, 32, 32, 0)?;
    let x = clip.to_tensor(DType::F32)?;
    let mut vt = VaeTrainer::new(VideoVae::new(VaeArch::default(), DType::F32, 0)?, VaeConfig::default(), VAE_LR.0, 0)?;
    let schedule = LrSchedule {
        lr_start: VAE_LR.0,
        lr_end: VAE_LR.1,
        horizon: VAE_STEPS,
    };
    for step in 0..VAE_STEPS {
        vt.set_learning_rate(anneal_lr(step, &schedule));
        vt.train_step(&x)?;
    }
    let recon = VideoClip::from_tensor(&vt.reconstruct(&x)?.clamp(-1f32, 1f32)?, clip.fps)?;
    let psnr = eval_metrics(&clip, &recon)?.psnr;

    let ratio = trained.final_eval / trained.initial_eval;

    let cfg = &trained.model.config;
    let (u, h, w) = GRID;
    let real = moving_square_latents(4, u, h, w, cfg.c_z, 4242)?;
    let mask = ConditionMask::first_units(&[true; 4], 1, &real)?;
    let x = sample(&trained.model, [4, u, h, w, cfg.c_z], &desk_cond(&trained.encoder, 4)?, Some(&mask), 16, 7, DType::F32)?;
    let kept = (0..4).all(|i| flat32(&x.get(i).unwrap().get(0).unwrap()) == flat32(&real.get(i).unwrap().get(0).unwrap()));

    let ok = psnr >= 30.0 && ratio < 0.1 && kept;
    Ok((
        ok,
        format!(
            "VAE PSNR {psnr:.2} dB after {VAE_STEPS} steps; DiT fixed-batch loss {:.4} -> {:.4} ({:.1}% of initial) after {DIT_STEPS} steps; conditioned unit bit-exact: {kept}",
            trained.initial_eval,
            trained.final_eval,
            100.0 * ratio
        ),
    ))
}

/// `v(x, t) = c` everywhere; data `x` sits at `z − c`.
struct ConstantVelocity(Tensor);

impl VelocityModel for ConstantVelocity {
    fn velocity(&self, x: &Tensor, _t: &Tensor, _c: &mugv::dit::Conditioning) -> Result<Tensor> {
        Ok(self.0.broadcast_as(x.shape())?.contiguous()?)
    }
}

fn sampler_and_rdpo(trained: &Trained) -> Outcome {
    let shape = [2, 2, 4, 4, 3];
    let mut rng = seeded_rng(21);
    // dyadic values keep every Euler update exact in binary floating point
    let dyadic = |rng: &mut rand_chacha::ChaCha8Rng| -> Result<Tensor> {
        let v: Vec<f64> = (0..shape.iter().product::<usize>()).map(|_| rng.random_range(-64i32..64) as f64 / 32.0).collect();
        Ok(Tensor::from_vec(v, shape.as_slice(), &Device::Cpu)?)
    };
    let c = dyadic(&mut rng)?;
    let z = dyadic(&mut rng)?;
    let toy = ConstantVelocity(c.clone());
    let cond = mugv::dit::Conditioning {
        text: Tensor::zeros((2, 1, 1), DType::F64, &Device::Cpu)?,
        text_mask: None,
        fps: vec![24.0; 2],
    };
    let data = (&z - &c)?;
    let one_step = sample_from(&toy, &z, &cond, None, 1)?;
    let exact = flat(&one_step) == flat(&data);

    let x = randn(&mut rng, &shape, DType::F64, &Device::Cpu)?;
    let mut round_trip = 0f64;
    for steps in [1, 4, 16] {
        let back = sample_from(&toy, &invert(&toy, &x, &cond, None, steps)?, &cond, None, steps)?;
        round_trip = round_trip.max(scalar(&(back - &x)?.abs()?.max_all()?));
    }

    let cfg = &trained.model.config;
    let (u, h, w) = GRID;
    let n = 64;
    let real = moving_square_latents(n, u, h, w, cfg.c_z, 777)?;
    let rc = desk_cond(&trained.encoder, n)?;
    let pairs = rdpo_pairs(&trained.model, &real, &rc, 16, 778)?;
    let winners = Tensor::stack(&pairs.iter().map(|p| p.winner.clone()).collect::<Vec<_>>(), 0)?;
    let losers = Tensor::stack(&pairs.iter().map(|p| p.loser.clone()).collect::<Vec<_>>(), 0)?;
    let draws = FlowBatch::draw(winners.clone(), rc.clone(), &mut seeded_rng(779))?;
    let ew = flat(&flow_errors(&trained.model, &winners, &rc, &draws.t, &draws.noise)?);
    let el = flat(&flow_errors(&trained.model, &losers, &rc, &draws.t, &draws.noise)?);
    let (mw, ml) = (ew.iter().sum::<f64>() / n as f64, el.iter().sum::<f64>() / n as f64);

    let ok = exact && round_trip <= 1e-5 && pairs.len() == n && mw < ml;
    Ok((
        ok,
        format!("1-step Euler exact: {exact}; round trip max error {round_trip:.2e}; RDPO mean flow error winners {mw:.4} vs losers {ml:.4} over {n} pairs"),
    ))
}

// 9 --------------------------------------------------------------------------

fn infra_checks() -> Outcome {
    let hand = balance_batches(&[8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0], 2)?;
    let hand_ok = hand.loads == [18.0, 18.0] && optimal_makespan(&[8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0], 2)? == 18.0;

    let mut rng = seeded_rng(31);
    let mut worst_ratio = 0f64;
    let mut instances = 0;
    for n in 1..=12 {
        for ranks in 2..=4 {
            for _ in 0..8 {
                let costs: Vec<f64> = (0..n).map(|_| rng.random_range(1..=30) as f64).collect();
                let lpt = balance_batches(&costs, ranks)?.max_load();
                worst_ratio = worst_ratio.max(lpt / optimal_makespan(&costs, ranks)?);
                instances += 1;
            }
        }
    }

    let mut bubble_ok = true;
    for pp in 1..=4 {
        for m in 1..=8 {
            bubble_ok &= simulate_pipeline(&vec![1.0; pp], m)?.bubble_fraction == bubble_fraction(pp, m);
        }
    }

    let c = 256;
    let n = 1 << 20;
    let mut v = |k: usize| -> Vec<f32> { (0..k).map(|_| rng.random_range(-8.0..8.0)).collect() };
    let (x, r, b, s, sh) = (v(n), v(n), v(c), v(c), v(c));
    let mut out = vec![0.0; n];
    let visits = fused_modulate(&x, &b, &s, &sh, &r, &mut out)?;
    let fused_ok = out == composed_modulate(&x, &b, &s, &sh, &r) && visits.x_reads == n && visits.writes == n;

    let ok = hand_ok && worst_ratio <= 4.0 / 3.0 && bubble_ok && fused_ok;
    Ok((
        ok,
        format!(
            "LPT 8..1 on 2 ranks {:?}; worst LPT/opt {worst_ratio:.4} over {instances} instances; bubble exact: {bubble_ok}; fused bit-equal on {n} elements: {fused_ok}",
            hand.loads
        ),
    ))
}

// 10 -------------------------------------------------------------------------

fn texture(y: f64, x: f64) -> f32 {
    (0.35 * (x * 0.785).sin() + 0.35 * (y * 0.6).sin() + 0.1 * (x * 0.31 + y * 0.47).cos()) as f32
}

fn datapipe_checks() -> Outcome {
    let cut = VideoClip::from_fn(64, 3, 16, 16, 24.0, |t, _, _, _| if t < 40 { -1.0 } else { 1.0 })?;
    let cuts = detect_scenes(&cut, DEFAULT_SCENE_THRESHOLD);

    let checker: Vec<f64> = (0..256).map(|i| if (i / 16 + i % 16) % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let sharp_checker = sharpness_score(&checker, 16, 16)?;
    let sharp_flat = sharpness_score(&[0.4; 256], 16, 16)?;

    let pan = VideoClip::from_fn(12, 3, 32, 32, 24.0, |t, _, y, x| texture(y as f64, x as f64 - 2.0 * t as f64))?;
    let motion = motion_amplitude(&pan)?;
    let pan_sharpness = clip_sharpness(&pan)?;

    let th = FilterThresholds::default();
    let gate = |sharp: f64, mot: f64, aesthetic: Option<f64>| -> Result<String> {
        let mut r = ClipRecord::new("g", 0, 8)?;
        r.scores.insert(SCORE_SHARPNESS.into(), sharp);
        r.scores.insert(SCORE_MOTION.into(), mot);
        if let Some(a) = aesthetic {
            r.scores.insert(SCORE_AESTHETIC.into(), a);
        }
        Ok(match filter_clip(r, &th)?.status {
            ClipStatus::Kept => "kept".into(),
            ClipStatus::Rejected { reasons } => reasons[0].clone(),
            ClipStatus::Pending => "pending".into(),
        })
    };
    let gates = [
        (gate(199.9, 5.0, None)?, "blurry"),
        (gate(200.0, 5.0, None)?, "kept"),
        (gate(2000.0, 5.0, None)?, "kept"),
        (gate(2000.1, 5.0, None)?, "oversharp"),
        (gate(500.0, 0.5, None)?, "static"),
        (gate(500.0, 1.0, None)?, "kept"),
        (gate(500.0, 20.0, None)?, "kept"),
        (gate(500.0, 25.0, None)?, "dynamic"),
        (gate(500.0, 5.0, Some(4.4))?, "aesthetic"),
        (gate(500.0, 5.0, Some(4.5))?, "kept"),
    ];
    let gates_ok = gates.iter().all(|(got, want)| got == want);

    let mut rng = seeded_rng(41);
    let mut clips: Vec<VideoClip> = (0..20)
        .map(|_| VideoClip::from_fn(6, 1, 16, 16, 24.0, |_, _, _, _| rng.random_range(-1.0..1.0)).unwrap())
        .collect();
    let noisy = {
        let base = clips[3].clone();
        let normal = rand_distr::Normal::new(0.0, 0.02).unwrap();
        let data: Vec<f32> = base.data().iter().map(|v| v + rand_distr::Distribution::<f64>::sample(&normal, &mut rng) as f32).collect();
        VideoClip::new(data, 6, 1, 16, 16, 24.0)?
    };
    clips.push(clips[7].clone());
    clips.push(noisy);
    let records: Vec<ClipRecord> = (0..clips.len()).map(|i| ClipRecord::new(&format!("c{i:02}"), 0, 6).unwrap()).collect();
    let lookup = |r: &ClipRecord| -> Result<VideoClip> { Ok(clips[r.source_id[1..].parse::<usize>().unwrap()].clone()) };
    let once = dedup(records, lookup)?;
    let twice = dedup(once.clone(), lookup)?;
    let dedup_ok = once.len() == 20 && once == twice;

    let dir = tempfile::tempdir()?;
    VideoClip::from_fn(20, 3, 32, 32, 24.0, |t, _, y, x| if t < 12 { texture(y as f64, x as f64 - 2.0 * t as f64) } else { -0.9 })?
        .write_raw(dir.path().join("a.f32"))?;
    pan.write_raw(dir.path().join("b.f32"))?;
    let m1 = run_pipeline(dir.path(), &BTreeMap::new(), &PipelineConfig::default())?.to_jsonl()?;
    let m2 = run_pipeline(dir.path(), &BTreeMap::new(), &PipelineConfig::default())?.to_jsonl()?;

    let ok = cuts == [40]
        && sharp_checker == 64.0
        && sharp_flat == 0.0
        && (motion - 2.0).abs() <= 0.1
        && gates_ok
        && dedup_ok
        && m1 == m2;
    Ok((
        ok,
        format!(
            "cuts {cuts:?}; checkerboard {sharp_checker}, flat {sharp_flat}; pan motion {motion:.3} px (sharpness {pan_sharpness:.0}); gates ok: {gates_ok}; dedup {} -> {} (idempotent: {}); manifest byte-identical: {}",
            clips.len(),
            once.len(),
            once == twice,
            m1 == m2
        ),
    ))
}

// 11 -------------------------------------------------------------------------

fn run_cli(args: &[&str], seed: Option<&str>) -> Result<(i32, Vec<u8>)> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mugv"));
    cmd.args(args).env_remove("MUGV_SEED");
    if let Some(s) = seed {
        cmd.env("MUGV_SEED", s);
    }
    let out = cmd.output()?;
    Ok((out.status.code().unwrap_or(-1), out.stdout))
}

fn formats_and_cli() -> Outcome {
    let dir = tempfile::tempdir()?;
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();

    let mut ps = ParameterSet::new();
    ps.insert("a", NamedTensor::f32(vec![2, 3], vec![1.5, -0.0, f32::MIN_POSITIVE, 3.25, f32::MAX, -7.0])?);
    ps.insert("b", NamedTensor::f64(vec![4], vec![std::f64::consts::PI, -1e-300, 0.0, 2.0])?);
    ps.insert("c", NamedTensor::f32(vec![1], vec![f32::EPSILON])?);
    ps.metadata.insert("model".into(), "test".into());
    save_checkpoint(&ps, p("x.ckpt"))?;
    let back = load_checkpoint(p("x.ckpt"))?;
    let bits = |s: &ParameterSet| to_bytes(s);
    let round_trip = back == ps && bits(&back) == bits(&ps);

    let bytes = to_bytes(&ps);
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    let truncated = &bytes[..bytes.len() - 3];
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header = std::str::from_utf8(&bytes[16..16 + header_len]).unwrap();
    let overlapping = header.replacen("\"offset\":24", "\"offset\":0", 1);
    let mut overlap_bytes = bytes[..8].to_vec();
    overlap_bytes.extend_from_slice(&(overlapping.len() as u64).to_le_bytes());
    overlap_bytes.extend_from_slice(overlapping.as_bytes());
    overlap_bytes.extend_from_slice(&bytes[16 + header_len..]);
    let taxonomy = matches!(from_bytes(&bad_magic), Err(CheckpointError::BadMagic))
        && matches!(from_bytes(truncated), Err(CheckpointError::Truncated(_)))
        && matches!(from_bytes(&overlap_bytes), Err(CheckpointError::Overlap { .. }));

    fs::write(p("vae.json"), r#"{"steps": 2, "frames": 8, "size": 16}"#)?;
    fs::write(p("dit.json"), r#"{"steps": 3, "batch": 2}"#)?;
    fs::write(p("post.json"), r#"{"steps": 2, "batch": 2, "sampler_steps": 2}"#)?;
    fs::write(p("model.json"), r#"{"flops_per_step": 1e15, "activation_bytes": 1e9, "param_bytes": 2e9}"#)?;
    fs::write(
        p("cluster.json"),
        r#"{"world_size": 8, "device_flops": 1e14, "intra_bandwidth": 1e11, "inter_bandwidth": 1e10, "devices_per_node": 4}"#,
    )?;
    let clips = dir.path().join("clips");
    fs::create_dir(&clips)?;
    VideoClip::from_fn(12, 3, 32, 32, 24.0, |t, _, y, x| texture(y as f64, x as f64 - 2.0 * t as f64))?.write_raw(clips.join("pan.f32"))?;
    moving_blob_clip(8, 16, 16, 0)?.write_raw(dir.path().join("ref.f32"))?;
    moving_blob_clip(8, 16, 16, 1)?.write_raw(dir.path().join("cand.f32"))?;

    let mut reproducible = true;
    let mut failures = Vec::new();
    let mut run_twice = |name: &str, args: Vec<String>, outputs: &[&str]| -> Result<()> {
        let mut seen = Vec::new();
        for _ in 0..2 {
            let argv: Vec<&str> = args.iter().map(String::as_str).collect();
            let (code, stdout) = run_cli(&argv, Some("17"))?;
            let mut blob = stdout;
            for o in outputs {
                blob.extend(fs::read(dir.path().join(o)).unwrap_or_default());
            }
            seen.push((code, blob));
        }
        if seen[0].0 != 0 || seen[0] != seen[1] {
            reproducible = false;
            failures.push(format!("{name} (exit {})", seen[0].0));
        }
        Ok(())
    };
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    run_twice("train-vae", s(&["train-vae", "--config", &p("vae.json"), "--out", &p("vae.ckpt"), "--metrics-out", &p("vae.jsonl")]), &["vae.ckpt", "vae.jsonl"])?;
    run_twice("train-dit", s(&["train-dit", "--config", &p("dit.json"), "--out", &p("dit.ckpt"), "--metrics-out", &p("dit.jsonl")]), &["dit.ckpt", "dit.jsonl"])?;
    run_twice("expand", s(&["expand", "--ckpt", &p("dit.ckpt"), "--out", &p("wide.ckpt")]), &["wide.ckpt"])?;
    run_twice("posttrain", s(&["posttrain", "--config", &p("post.json"), "--ckpt", &p("dit.ckpt"), "--out", &p("post.ckpt")]), &["post.ckpt"])?;
    run_twice("sample", s(&["sample", "--ckpt", &p("dit.ckpt"), "--steps", "4", "--out", &p("lat.ckpt")]), &["lat.ckpt"])?;
    run_twice("datapipe", s(&["datapipe", "run", "--in", &clips.to_string_lossy(), "--out", &p("manifest.jsonl")]), &["manifest.jsonl"])?;
    run_twice("plan", s(&["plan", "--model", &p("model.json"), "--cluster", &p("cluster.json"), "--microbatches", "8"]), &[])?;
    run_twice("eval", s(&["eval", "--reference", &p("ref.f32"), "--candidate", &p("cand.f32")]), &[])?;

    let (unknown, _) = run_cli(&["frobnicate"], None)?;
    let (zero_steps, _) = run_cli(&["sample", "--ckpt", &p("dit.ckpt"), "--steps", "0"], None)?;
    let codes_ok = unknown == 1 && zero_steps == 1;

    let ok = round_trip && taxonomy && reproducible && codes_ok;
    Ok((
        ok,
        format!(
            "checkpoint round trip bit-exact: {round_trip}; error taxonomy: {taxonomy}; 8 commands byte-reproducible: {reproducible}{}; exit codes unknown/steps=0: {unknown}/{zero_steps}",
            if failures.is_empty() { String::new() } else { format!(" (failed: {})", failures.join(", ")) }
        ),
    ))
}

/// `MUGV_CRITERIA=5,7` restricts the run to the listed criteria.
fn selected(id: usize) -> bool {
    match std::env::var("MUGV_CRITERIA") {
        Ok(list) => list.split(',').any(|s| s.trim().parse() == Ok(id)),
        Err(_) => true,
    }
}

fn report(id: usize, name: &str, limit_s: Option<f64>, f: impl FnOnce() -> Outcome) -> bool {
    if !selected(id) {
        return true;
    }
    let start = Instant::now();
    let result = f();
    let secs = start.elapsed().as_secs_f64();
    let (mut pass, detail) = match result {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    let mut timing = format!("{secs:.1}s");
    if let Some(limit) = limit_s {
        timing.push_str(&format!(" of {limit:.0}s budget"));
        pass &= secs < limit;
    }
    println!("criterion {id:2} [{}] {name}: {detail} ({timing})", if pass { "PASS" } else { "FAIL" });
    pass
}

fn main() {
    let mut all = true;
    all &= report(1, "chunk-local encoding", Some(10.0), chunk_independence);
    all &= report(2, "expansion preservation", Some(30.0), expansion_preservation);
    all &= report(3, "literal bias deviation", None, literal_bias_deviation);
    all &= report(4, "3D rotary embedding", None, rope_checks);
    all &= report(5, "gradient suite", Some(300.0), gradient_suite);
    all &= report(6, "closed-form losses", None, closed_forms);
    if !selected(7) && !selected(8) {
        all &= report(9, "infrastructure algorithms", None, infra_checks);
        all &= report(10, "data pipeline", None, datapipe_checks);
        all &= report(11, "formats and CLI", None, formats_and_cli);
        std::process::exit(i32::from(!all));
    }
    let start = Instant::now();
    let trained = train_desk_dit();
    let train_secs = start.elapsed().as_secs_f64();
    match trained {
        Ok(trained) => {
            all &= report(7, "overfit smoke tests", Some(600.0 - train_secs), || overfit_smoke(&trained));
            all &= report(8, "sampler and RDPO", None, || sampler_and_rdpo(&trained));
        }
        Err(e) => {
            println!("criterion  7 [FAIL] overfit smoke tests: transformer training failed: {e}");
            println!("criterion  8 [FAIL] sampler and RDPO: transformer training failed: {e}");
            all = false;
        }
    }
    all &= report(9, "infrastructure algorithms", None, infra_checks);
    all &= report(10, "data pipeline", None, datapipe_checks);
    all &= report(11, "formats and CLI", None, formats_and_cli);
    if !all {
        std::process::exit(1);
    }
}
