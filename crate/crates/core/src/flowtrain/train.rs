use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dit::model::{Conditioning, DiT};
use crate::error::{Error, Result};
use crate::flowtrain::objective::{apply_condition_mask, flow_loss, interpolate, ConditionMask};
use crate::params::{randn, seeded_rng};

/// One supervised batch with its interpolation times and noise fixed.
#[derive(Debug, Clone)]
pub struct FlowBatch {
    /// `(B, U, h, w, C)`.
    pub latents: Tensor,
    pub cond: Conditioning,
    pub t: Vec<f64>,
    pub noise: Tensor,
}

impl FlowBatch {
    /// Draws `t ~ U(0, 1)` per sample and standard normal noise.
    pub fn draw(latents: Tensor, cond: Conditioning, rng: &mut ChaCha8Rng) -> Result<Self> {
        let b = latents.dims()[0];
        let t = (0..b)
            .map(|_| loop {
                let v: f64 = rng.random();
                if v > 0.0 {
                    break v;
                }
            })
            .collect();
        let noise = randn(rng, latents.dims(), latents.dtype(), &Device::Cpu)?;
        Ok(Self { latents, cond, t, noise })
    }

    pub fn batch(&self) -> usize {
        self.t.len()
    }
}

/// Chance that a sample gets its first latent unit as a clean condition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskPolicy {
    pub first_frame_prob: f64,
}

impl MaskPolicy {
    pub const NONE: Self = Self { first_frame_prob: 0.0 };

    pub fn draw(&self, latents: &Tensor, rng: &mut ChaCha8Rng) -> Result<ConditionMask> {
        let (b, u, _, _, _) = latents.dims5()?;
        // a single-unit sample is an image; conditioning all of it leaves nothing to learn
        let flags: Vec<bool> = (0..b)
            .map(|_| u > 1 && self.first_frame_prob > 0.0 && rng.random_bool(self.first_frame_prob.min(1.0)))
            .collect();
        ConditionMask::first_units(&flags, 1, latents)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlowStepMetrics {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Training-run metrics line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub stage: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub image_ratio: f64,
}

/// Appends one JSON object per line.
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        Ok(self.out.flush()?)
    }
}

pub struct FlowTrainer {
    pub model: DiT,
    opt: AdamW,
    rng: ChaCha8Rng,
    step: usize,
}

impl FlowTrainer {
    pub fn new(model: DiT, lr: f64, weight_decay: f64, seed: u64) -> Result<Self> {
        let opt = AdamW::new(
            model.params.all_vars(),
            ParamsAdamW {
                lr,
                weight_decay,
                ..Default::default()
            },
        )?;
        Ok(Self {
            model,
            opt,
            rng: seeded_rng(seed),
            step: 0,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Masked flow-matching loss of the current model on `batch`.
    pub fn loss(&self, batch: &FlowBatch, mask: &ConditionMask) -> Result<Tensor> {
        flow_batch_loss(&self.model, batch, mask)
    }

    pub fn train_step(&mut self, batch: &FlowBatch, policy: &MaskPolicy, lr: f64) -> Result<FlowStepMetrics> {
        let mask = policy.draw(&batch.latents, &mut self.rng)?;
        let loss = self.loss(batch, &mask)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite flow loss {value} at step {}", self.step)));
        }
        let grads = loss.backward()?;
        let mut sq = 0.0;
        for var in self.model.params.all_vars() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient norm at step {}", self.step)));
        }
        self.opt.set_learning_rate(lr);
        self.opt.step(&grads)?;
        let metrics = FlowStepMetrics {
            step: self.step,
            loss: value,
            grad_norm,
            lr,
        };
        self.step += 1;
        Ok(metrics)
    }
}

/// Loss of `model` on `batch` with the given conditioning mask.
pub fn flow_batch_loss(model: &DiT, batch: &FlowBatch, mask: &ConditionMask) -> Result<Tensor> {
    let dtype = batch.latents.dtype();
    let t = Tensor::from_vec(batch.t.clone(), batch.batch(), &Device::Cpu)?.to_dtype(dtype)?;
    let (x_t, v) = interpolate(&batch.latents, &batch.noise, &t)?;
    let n: usize = mask.dims().iter().product();
    let per_token = t.reshape((batch.batch(), 1))?.broadcast_as((batch.batch(), n))?.contiguous()?;
    let input = apply_condition_mask(&x_t, &per_token, mask)?;
    let pred = model.forward(&input.latents, &input.timesteps, &batch.cond)?;
    flow_loss(&pred, &v, Some(&input.loss_mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::config::{rope_split_for, DiTConfig};
    use crate::flowtrain::toy::moving_square_latents;

    fn tiny() -> DiTConfig {
        DiTConfig {
            depth: 1,
            hidden: 16,
            heads: 2,
            head_dim: 8,
            text_dim: 8,
            c_z: 4,
            rope_split: rope_split_for(8, [1, 1, 1]),
            rope_base: 10_000.0,
            freq_dim: 8,
            mlp_ratio: 2,
        }
    }

    fn batch(cfg: &DiTConfig, dtype: DType, seed: u64) -> FlowBatch {
        let mut rng = seeded_rng(seed);
        let lat = moving_square_latents(2, 2, 4, 4, cfg.c_z, seed).unwrap().to_dtype(dtype).unwrap();
        let cond = Conditioning {
            text: randn(&mut rng, &[2, 2, cfg.text_dim], dtype, &Device::Cpu).unwrap(),
            text_mask: None,
            fps: vec![24.0, 12.0],
        };
        FlowBatch::draw(lat, cond, &mut rng).unwrap()
    }

    fn flat(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn identical_seeds_identical_state() {
        let cfg = tiny();
        let b = batch(&cfg, DType::F32, 0);
        let policy = MaskPolicy { first_frame_prob: 0.5 };
        let run = || {
            let mut tr = FlowTrainer::new(DiT::new(cfg.clone(), DType::F32, 1).unwrap(), 1e-3, 0.01, 2).unwrap();
            let mut losses = Vec::new();
            for _ in 0..3 {
                losses.push(tr.train_step(&b, &policy, 1e-3).unwrap().loss);
            }
            let state: Vec<Vec<f64>> = tr.model.params.all_vars().iter().map(|v| flat(v.as_tensor())).collect();
            (losses, state)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let cfg = tiny();
        let b = batch(&cfg, DType::F64, 3);
        let model = DiT::new(cfg.clone(), DType::F64, 4).unwrap();
        let mask = ConditionMask::first_units(&[true, false], 1, &b.latents).unwrap();
        let loss = |m: &DiT| flow_batch_loss(m, &b, &mask).unwrap();
        let grads = loss(&model).backward().unwrap();
        for (name, idx) in [("blocks.0.attn.wv.weight", 5), ("global.fc2.weight", 17), ("final.head.bias", 2)] {
            let var = model.params.var(name).unwrap();
            let g = flat(grads.get(var.as_tensor()).unwrap())[idx];
            let base = flat(var.as_tensor());
            let shape = var.as_tensor().dims().to_vec();
            let eval = |d: f64| {
                let mut v = base.clone();
                v[idx] += d;
                model.params.set(name, &Tensor::from_vec(v, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
                loss(&model).to_scalar::<f64>().unwrap()
            };
            let fd = (eval(1e-6) - eval(-1e-6)) / 2e-6;
            model.params.set(name, &Tensor::from_vec(base, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
            let rel = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-8);
            assert!(rel <= 1e-3, "{name}: {g} vs {fd}");
        }
    }

    #[test]
    fn non_finite_batch_aborts() {
        let cfg = tiny();
        let mut b = batch(&cfg, DType::F32, 5);
        b.noise = (b.noise * f64::NAN).unwrap();
        let mut tr = FlowTrainer::new(DiT::new(cfg, DType::F32, 6).unwrap(), 1e-3, 0.0, 7).unwrap();
        assert!(matches!(tr.train_step(&b, &MaskPolicy::NONE, 1e-3), Err(Error::Numeric(_))));
    }

    #[test]
    fn metrics_lines_parse() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut w = MetricsWriter::create(&path).unwrap();
        for step in 0..3 {
            w.write(&MetricsRecord {
                step,
                stage: 1,
                loss: 0.5,
                grad_norm: 1.0,
                lr: 1e-3,
                image_ratio: 0.5,
            })
            .unwrap();
        }
        w.flush().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 3);
        for key in ["step", "stage", "loss", "grad_norm", "lr", "image_ratio"] {
            assert!(lines[2].get(key).is_some());
        }
    }
}
