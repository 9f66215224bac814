//! Checkpoint ensembling, annealed fine-tuning and preference optimization.
//!
//! Preference losses use flow-matching regression errors as implicit
//! rewards: a sample the model fits better than the reference gets a
//! positive reward `β·(e_ref − e_θ)`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dit::model::{Conditioning, DiT};
use crate::error::{Error, Result};
use crate::flowtrain::objective::{flow_loss, interpolate};
use crate::flowtrain::sampler::{invert, sample_from, VelocityModel};
use crate::flowtrain::train::FlowBatch;
use crate::params::{randn, NamedTensor, ParameterSet};

/// Which preference objective a batch feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackKind {
    Dpo,
    Kto,
}

/// Where a preference pair came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    HumanPairwise,
    Rdpo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostTrainConfig {
    pub beta: f64,
    pub alpha_sft: f64,
    pub gamma_merge: f64,
    pub w_desirable: f64,
    pub w_undesirable: f64,
    pub interleave: Vec<FeedbackKind>,
}

impl Default for PostTrainConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            alpha_sft: 1.0,
            gamma_merge: 0.9,
            w_desirable: 1.0,
            w_undesirable: 1.0,
            interleave: vec![FeedbackKind::Dpo, FeedbackKind::Kto],
        }
    }
}

impl PostTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.alpha_sft >= 0.0) {
            return Err(Error::Config(format!("alpha_sft must be non-negative, got {}", self.alpha_sft)));
        }
        if !(self.gamma_merge > 0.0 && self.gamma_merge <= 1.0) {
            return Err(Error::Config(format!("gamma_merge must lie in (0, 1], got {}", self.gamma_merge)));
        }
        if !(self.w_desirable > 0.0 && self.w_undesirable > 0.0) {
            return Err(Error::Config("KTO weights must be positive".into()));
        }
        if self.interleave.is_empty() {
            return Err(Error::Config("interleave plan is empty".into()));
        }
        Ok(())
    }
}

/// Normalized weights `∝ γ^(K−i)`, oldest first.
pub fn merge_weights(k: usize, gamma: f64) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(Error::Config("need at least one checkpoint to merge".into()));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Config(format!("gamma must lie in (0, 1], got {gamma}")));
    }
    let raw: Vec<f64> = (1..=k).map(|i| gamma.powi((k - i) as i32)).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Exponentially decayed average of checkpoints ordered oldest to newest.
pub fn merge_checkpoints(checkpoints: &[ParameterSet], gamma: f64) -> Result<ParameterSet> {
    let weights = merge_weights(checkpoints.len(), gamma)?;
    let first = &checkpoints[0];
    for (i, ck) in checkpoints.iter().enumerate().skip(1) {
        let same_names = ck.len() == first.len() && ck.names().zip(first.names()).all(|(a, b)| a == b);
        if !same_names {
            return Err(Error::Config(format!("checkpoint {i} holds different tensors than checkpoint 0")));
        }
        for (name, t) in ck.iter() {
            let f = first.require(name)?;
            if t.shape != f.shape {
                return Err(Error::Config(format!(
                    "tensor {name}: shape {:?} in checkpoint {i} vs {:?} in checkpoint 0",
                    t.shape, f.shape
                )));
            }
        }
    }
    let mut out = ParameterSet::new();
    out.metadata = checkpoints.last().map(|c| c.metadata.clone()).unwrap_or_default();
    for (name, t) in first.iter() {
        let mut acc = vec![0.0; t.numel()];
        for (ck, w) in checkpoints.iter().zip(&weights) {
            for (a, v) in acc.iter_mut().zip(ck.require(name)?.data.to_f64()) {
                *a += w * v;
            }
        }
        out.insert(name.clone(), NamedTensor::new(t.shape.clone(), t.data.like(acc))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub lr_start: f64,
    pub lr_end: f64,
    pub horizon: usize,
}

/// Cosine decay from `lr_start` at step 0 to `lr_end` at `horizon`, flat afterwards.
pub fn anneal_lr(step: usize, s: &LrSchedule) -> f64 {
    if s.horizon == 0 || step >= s.horizon {
        return s.lr_end;
    }
    let p = step as f64 / s.horizon as f64;
    s.lr_end + 0.5 * (s.lr_start - s.lr_end) * (1.0 + (std::f64::consts::PI * p).cos())
}

/// `log(1 + e^x)` built from differentiable primitives.
fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((pos + tail)?)
}

fn log_sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(softplus(&x.neg()?)?.neg()?)
}

fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(log_sigmoid(x)?.exp()?)
}

/// Mean DPO loss from per-pair flow errors `(P,)`.
pub fn dpo_from_errors(e_w: &Tensor, e_l: &Tensor, e_ref_w: &Tensor, e_ref_l: &Tensor, beta: f64) -> Result<Tensor> {
    if e_w.dims1()? == 0 {
        return Err(Error::Input("empty preference batch".into()));
    }
    let margin = ((e_ref_w - e_w)? - (e_ref_l - e_l)?)?;
    Ok(log_sigmoid(&(margin * beta)?)?.neg()?.mean_all()?)
}

/// Mean KTO loss from per-sample flow errors. `z0` overrides the detached batch-mean baseline.
pub fn kto_from_errors(
    e: &Tensor,
    e_ref: &Tensor,
    desirable: &[bool],
    beta: f64,
    weights: (f64, f64),
    z0: Option<f64>,
) -> Result<Tensor> {
    let n = e.dims1()?;
    if n == 0 {
        return Err(Error::Input("empty labeled batch".into()));
    }
    if desirable.len() != n {
        return Err(Error::dim("batch", format!("{} labels for {n} samples", desirable.len())));
    }
    let r = ((e_ref - e)? * beta)?;
    let z0 = match z0 {
        Some(z) => Tensor::full(z, (), e.device())?.to_dtype(e.dtype())?,
        None => r.mean_all()?.detach(),
    };
    let centered = r.broadcast_sub(&z0)?;
    let sign: Vec<f64> = desirable.iter().map(|&d| if d { 1.0 } else { -1.0 }).collect();
    let w: Vec<f64> = desirable.iter().map(|&d| if d { weights.0 } else { weights.1 }).collect();
    let sign = Tensor::from_vec(sign, n, e.device())?.to_dtype(e.dtype())?;
    let w = Tensor::from_vec(w, n, e.device())?.to_dtype(e.dtype())?;
    let terms = (w * sigmoid(&(centered * sign)?)?.affine(-1.0, 1.0)?)?;
    Ok(terms.mean_all()?)
}

/// Pairs sharing conditioning and, within each pair, the `(t, noise)` draw.
#[derive(Debug, Clone)]
pub struct PreferenceBatch {
    pub winners: Tensor,
    pub losers: Tensor,
    pub cond: Conditioning,
    pub t: Vec<f64>,
    pub noise: Tensor,
}

#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub samples: Tensor,
    pub desirable: Vec<bool>,
    pub cond: Conditioning,
    pub t: Vec<f64>,
    pub noise: Tensor,
}

#[derive(Debug, Clone)]
pub enum FeedbackBatch {
    Dpo(PreferenceBatch),
    Kto(LabeledBatch),
}

impl FeedbackBatch {
    pub fn kind(&self) -> FeedbackKind {
        match self {
            FeedbackBatch::Dpo(_) => FeedbackKind::Dpo,
            FeedbackBatch::Kto(_) => FeedbackKind::Kto,
        }
    }
}

fn draw_t_noise(latents: &Tensor, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Tensor)> {
    let fb = FlowBatch::draw(latents.clone(), dummy_cond(latents.dims()[0], latents.dtype())?, rng)?;
    Ok((fb.t, fb.noise))
}

fn dummy_cond(b: usize, dtype: DType) -> Result<Conditioning> {
    Ok(Conditioning {
        text: Tensor::zeros((b, 1, 1), dtype, &Device::Cpu)?,
        text_mask: None,
        fps: vec![0.0; b],
    })
}

impl PreferenceBatch {
    pub fn new(winners: Tensor, losers: Tensor, cond: Conditioning, rng: &mut ChaCha8Rng) -> Result<Self> {
        if winners.dims() != losers.dims() {
            return Err(Error::dim("shape", format!("winners {:?} vs losers {:?}", winners.dims(), losers.dims())));
        }
        let (t, noise) = draw_t_noise(&winners, rng)?;
        Ok(Self {
            winners,
            losers,
            cond,
            t,
            noise,
        })
    }
}

impl LabeledBatch {
    pub fn new(samples: Tensor, desirable: Vec<bool>, cond: Conditioning, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (t, noise) = draw_t_noise(&samples, rng)?;
        Ok(Self {
            samples,
            desirable,
            cond,
            t,
            noise,
        })
    }
}

/// Per-sample flow regression error `(B,)` at fixed `(t, noise)`.
pub fn flow_errors<M: VelocityModel>(model: &M, x: &Tensor, cond: &Conditioning, t: &[f64], noise: &Tensor) -> Result<Tensor> {
    let b = x.dims()[0];
    let tt = Tensor::from_vec(t.to_vec(), b, &Device::Cpu)?.to_dtype(x.dtype())?;
    let (x_t, v) = interpolate(x, noise, &tt)?;
    let (_, u, h, w, _) = x.dims5()?;
    let n = u * (h / 2) * (w / 2);
    let ts = tt.reshape((b, 1))?.broadcast_as((b, n))?.contiguous()?;
    let pred = model.velocity(&x_t, &ts, cond)?;
    Ok((pred - v)?.sqr()?.flatten_from(1)?.mean(D::Minus1)?)
}

fn stack_pair(batch: &PreferenceBatch) -> Result<(Tensor, Conditioning, Vec<f64>, Tensor)> {
    let x = Tensor::cat(&[&batch.winners, &batch.losers], 0)?;
    let cond = Conditioning {
        text: Tensor::cat(&[&batch.cond.text, &batch.cond.text], 0)?,
        text_mask: match &batch.cond.text_mask {
            Some(m) => Some(Tensor::cat(&[m, m], 0)?),
            None => None,
        },
        fps: batch.cond.fps.iter().chain(&batch.cond.fps).copied().collect(),
    };
    let t = batch.t.iter().chain(&batch.t).copied().collect();
    let noise = Tensor::cat(&[&batch.noise, &batch.noise], 0)?;
    Ok((x, cond, t, noise))
}

pub fn dpo_loss(model: &DiT, reference: &DiT, batch: &PreferenceBatch, beta: f64) -> Result<Tensor> {
    let p = batch.winners.dims()[0];
    if p == 0 {
        return Err(Error::Input("empty preference batch".into()));
    }
    let (x, cond, t, noise) = stack_pair(batch)?;
    let e = flow_errors(model, &x, &cond, &t, &noise)?;
    let e_ref = flow_errors(reference, &x, &cond, &t, &noise)?.detach();
    dpo_from_errors(&e.narrow(0, 0, p)?, &e.narrow(0, p, p)?, &e_ref.narrow(0, 0, p)?, &e_ref.narrow(0, p, p)?, beta)
}

pub fn kto_loss(model: &DiT, reference: &DiT, batch: &LabeledBatch, config: &PostTrainConfig) -> Result<Tensor> {
    if batch.samples.dims()[0] == 0 {
        return Err(Error::Input("empty labeled batch".into()));
    }
    let e = flow_errors(model, &batch.samples, &batch.cond, &batch.t, &batch.noise)?;
    let e_ref = flow_errors(reference, &batch.samples, &batch.cond, &batch.t, &batch.noise)?.detach();
    kto_from_errors(&e, &e_ref, &batch.desirable, config.beta, (config.w_desirable, config.w_undesirable), None)
}

/// A generated preference pair.
#[derive(Debug, Clone)]
pub struct PreferencePair {
    /// `(U, h, w, C)`.
    pub winner: Tensor,
    pub loser: Tensor,
    pub source: PairSource,
}

/// Builds one pair per real latent: the winner is regenerated from the
/// inverted real sample, the loser from fresh noise under the same conditioning.
pub fn rdpo_pairs<M: VelocityModel>(
    model: &M,
    real: &Tensor,
    cond: &Conditioning,
    steps: usize,
    seed: u64,
) -> Result<Vec<PreferencePair>> {
    let winners = {
        let z = invert(model, real, cond, None, steps)?;
        sample_from(model, &z, cond, None, steps)?
    };
    let fresh = randn(&mut crate::params::seeded_rng(seed), real.dims(), real.dtype(), &Device::Cpu)?;
    let losers = sample_from(model, &fresh, cond, None, steps)?;
    (0..real.dims()[0])
        .map(|i| {
            Ok(PreferencePair {
                winner: winners.get(i)?,
                loser: losers.get(i)?,
                source: PairSource::Rdpo,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PostStepMetrics {
    pub step: usize,
    pub kind: FeedbackKind,
    pub preference_loss: f64,
    pub sft_loss: f64,
    pub total: f64,
    pub lr: f64,
}

pub struct PostTrainer {
    pub model: DiT,
    reference: DiT,
    pub config: PostTrainConfig,
    opt: AdamW,
    plan_pos: usize,
    step: usize,
}

impl PostTrainer {
    /// The reference is a frozen copy of `model` at construction time.
    pub fn new(model: DiT, config: PostTrainConfig, lr: f64) -> Result<Self> {
        config.validate()?;
        let reference = DiT::from_store(model.config.clone(), model.params.deep_clone()?)?;
        Self::with_reference(model, reference, config, lr)
    }

    pub fn with_reference(model: DiT, reference: DiT, config: PostTrainConfig, lr: f64) -> Result<Self> {
        config.validate()?;
        let opt = AdamW::new(
            model.params.all_vars(),
            ParamsAdamW {
                lr,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        Ok(Self {
            model,
            reference,
            config,
            opt,
            plan_pos: 0,
            step: 0,
        })
    }

    pub fn reference(&self) -> &DiT {
        &self.reference
    }

    /// Kind the next batch must have.
    pub fn expected_kind(&self) -> FeedbackKind {
        self.config.interleave[self.plan_pos % self.config.interleave.len()]
    }

    /// `(total, preference, sft)` losses for one batch.
    pub fn losses(&self, batch: &FeedbackBatch, sft: Option<&FlowBatch>) -> Result<(Tensor, Tensor, Tensor)> {
        let pref = match batch {
            FeedbackBatch::Dpo(b) => dpo_loss(&self.model, &self.reference, b, self.config.beta)?,
            FeedbackBatch::Kto(b) => kto_loss(&self.model, &self.reference, b, &self.config)?,
        };
        let sft_loss = match sft {
            Some(s) if self.config.alpha_sft > 0.0 => sft_flow_loss(&self.model, s)?,
            _ => pref.zeros_like()?,
        };
        let total = (&pref + (&sft_loss * self.config.alpha_sft)?)?;
        Ok((total, pref, sft_loss))
    }

    pub fn step(&mut self, batch: &FeedbackBatch, sft: Option<&FlowBatch>, lr: f64) -> Result<PostStepMetrics> {
        let want = self.expected_kind();
        if batch.kind() != want {
            return Err(Error::Scheduling(format!(
                "interleave plan expects a {want:?} batch at position {}, got {:?}",
                self.plan_pos,
                batch.kind()
            )));
        }
        let (total, pref, sft_loss) = self.losses(batch, sft)?;
        let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        let total_v = scalar(&total)?;
        if !total_v.is_finite() {
            return Err(Error::Numeric(format!("non-finite post-training loss at step {}", self.step)));
        }
        self.opt.set_learning_rate(lr);
        self.opt.backward_step(&total)?;
        let m = PostStepMetrics {
            step: self.step,
            kind: want,
            preference_loss: scalar(&pref)?,
            sft_loss: scalar(&sft_loss)?,
            total: total_v,
            lr,
        };
        self.plan_pos += 1;
        self.step += 1;
        Ok(m)
    }
}

fn sft_flow_loss(model: &DiT, batch: &FlowBatch) -> Result<Tensor> {
    let b = batch.batch();
    let tt = Tensor::from_vec(batch.t.clone(), b, &Device::Cpu)?.to_dtype(batch.latents.dtype())?;
    let (x_t, v) = interpolate(&batch.latents, &batch.noise, &tt)?;
    let (_, u, h, w, _) = batch.latents.dims5()?;
    let n = u * (h / 2) * (w / 2);
    let ts = tt.reshape((b, 1))?.broadcast_as((b, n))?.contiguous()?;
    let pred = model.forward(&x_t, &ts, &batch.cond)?;
    flow_loss(&pred, &v, None)
}

/// One line of a preference data file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreferenceRecord {
    pub kind: RecordKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub winner: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loser: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub desirable: Option<bool>,
    pub source: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Pair,
    Label,
}

impl PreferenceRecord {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            RecordKind::Pair if self.winner.is_none() || self.loser.is_none() => {
                Err(Error::Input("pair record needs winner and loser".into()))
            }
            RecordKind::Label if self.sample.is_none() || self.desirable.is_none() => {
                Err(Error::Input("label record needs sample and desirable".into()))
            }
            _ => Ok(()),
        }
    }
}

pub fn read_preferences(path: &Path) -> Result<Vec<PreferenceRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PreferenceRecord =
            serde_json::from_str(&line).map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), i + 1)))?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_preferences(path: &Path, records: &[PreferenceRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
