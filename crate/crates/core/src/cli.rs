//! Command-line entry point shared by the `mugv` binary and the tests.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::datapipe::{run_pipeline, FilterThresholds, PipelineConfig};
use crate::dit::{DiT, DiTConfig, TextEncoder, DEFAULT_MAX_LEN, DEFAULT_VOCAB};
use crate::error::{Error, Result};
use crate::expansion::{expand_dit, random_dit_inputs, verify_preservation, BiasMode, ExpansionConfig};
use crate::flowtrain::{moving_square_latents, sample, FlowBatch, FlowTrainer, MaskPolicy};
use crate::infra::{plan_parallelism, ClusterSpec, ModelCost};
use crate::metrics::eval_metrics;
use crate::params::{seeded_rng, NamedTensor, ParameterSet, Precision};
use crate::posttrain::{
    anneal_lr, merge_checkpoints, rdpo_pairs, read_preferences, FeedbackBatch, FeedbackKind, LabeledBatch, LrSchedule,
    PostTrainConfig, PostTrainer, PreferenceBatch, RecordKind,
};
use crate::videovae::{moving_blob_clip, VaeArch, VaeConfig, VaeTrainer, VideoClip, VideoVae};

pub const SEED_ENV: &str = "MUGV_SEED";

#[derive(Debug, Parser)]
#[command(name = "mugv", version, about = "Desk-scale latent video generation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct Common {
    /// JSON configuration; unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Write JSON-lines metrics here instead of stdout.
    #[arg(long)]
    pub metrics_out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the video autoencoder on one clip.
    TrainVae {
        #[command(flatten)]
        common: Common,
        /// Raw clip (`.f32` with JSON sidecar); a synthetic clip if omitted.
        #[arg(long)]
        clip: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Flow-matching training of the diffusion transformer on toy latents.
    TrainDit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Permit the full-size preset.
        #[arg(long)]
        allow_full: bool,
    },
    /// Widen a trained transformer.
    Expand {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Preference fine-tuning with interleaved pair and label feedback.
    Posttrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Preference records whose paths name latent containers; pairs are
        /// generated from toy data if omitted.
        #[arg(long)]
        prefs: Option<PathBuf>,
    },
    /// Draw latent samples from a trained transformer.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        prompt: Option<String>,
        /// Output latent container; stdout summary only if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Corpus curation.
    Datapipe {
        #[command(subcommand)]
        action: DatapipeAction,
    },
    /// Rank data, tensor and pipeline parallel layouts.
    Plan {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        cluster: PathBuf,
        #[arg(long, default_value_t = 8)]
        microbatches: usize,
    },
    /// PSNR and SSIM between two raw clips.
    Eval {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        candidate: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum DatapipeAction {
    Run {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        thresholds: Option<PathBuf>,
        /// JSON map from source id to tag list.
        #[arg(long)]
        tags: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    #[serde(alias = "paper")]
    Full,
}

/// Resolves a transformer config from a preset or an explicit override.
pub fn resolve_dit(preset: Preset, explicit: Option<&DiTConfig>, allow_full: bool) -> Result<DiTConfig> {
    let cfg = match (explicit, preset) {
        (Some(c), _) => c.clone(),
        (None, Preset::Desk) => DiTConfig::desk(),
        (None, Preset::Full) if allow_full => DiTConfig::full(),
        (None, Preset::Full) => {
            return Err(Error::Config("the full-size preset is documentation only; pass --allow-full to run it".into()))
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainVaeConfig {
    pub seed: u64,
    pub precision: Precision,
    pub arch: VaeArch,
    pub loss: VaeConfig,
    pub steps: usize,
    pub lr: f64,
    pub frames: usize,
    pub size: usize,
}

impl Default for TrainVaeConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::Single,
            arch: VaeArch::default(),
            loss: VaeConfig::default(),
            steps: 20,
            lr: 2e-3,
            frames: 16,
            size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainDitConfig {
    pub seed: u64,
    pub precision: Precision,
    pub preset: Preset,
    pub model: Option<DiTConfig>,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub units: usize,
    pub grid: [usize; 2],
    pub first_frame_prob: f64,
    pub prompt: String,
}

impl Default for TrainDitConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::Single,
            preset: Preset::Desk,
            model: None,
            steps: 20,
            lr: 1e-3,
            weight_decay: 0.0,
            batch: 4,
            units: 2,
            grid: [4, 4],
            first_frame_prob: 0.25,
            prompt: "a square moving right".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpandRunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub e: usize,
    pub eps_scale: f64,
    pub bias_mode: BiasMode,
    /// Inputs used to check the widened model; 0 skips the check.
    pub verify_inputs: usize,
    pub tol: f64,
}

impl Default for ExpandRunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::Single,
            e: 2,
            eps_scale: 1e-3,
            bias_mode: BiasMode::PreserveFunction,
            verify_inputs: 4,
            tol: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PosttrainRunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub post: PostTrainConfig,
    pub steps: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub batch: usize,
    /// Toy data when no preference file is given.
    pub units: usize,
    pub grid: [usize; 2],
    pub sampler_steps: usize,
    pub prompt: String,
    /// Merge the last `merge_last` step checkpoints.
    pub merge_last: usize,
}

impl Default for PosttrainRunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::Single,
            post: PostTrainConfig::default(),
            steps: 6,
            lr_start: 1e-4,
            lr_end: 1e-5,
            batch: 2,
            units: 2,
            grid: [4, 4],
            sampler_steps: 4,
            prompt: "a square moving right".into(),
            merge_last: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub seed: u64,
    pub precision: Precision,
    pub steps: usize,
    pub count: usize,
    pub units: usize,
    pub grid: [usize; 2],
    pub prompt: String,
    pub fps: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::Single,
            steps: 8,
            count: 1,
            units: 2,
            grid: [4, 4],
            prompt: "a square moving right".into(),
            fps: 24.0,
        }
    }
}

/// Reads a strict JSON config, or the defaults when no path is given.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => serde_json::from_slice(&fs::read(p)?)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display()))),
    }
}

/// `MUGV_SEED` wins over the configured seed.
pub fn effective_seed(configured: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(configured),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_slice(&fs::read(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

struct Metrics {
    out: Box<dyn Write>,
}

impl Metrics {
    fn open(path: Option<&Path>) -> Result<Self> {
        let out: Box<dyn Write> = match path {
            Some(p) => Box::new(BufWriter::new(fs::File::create(p)?)),
            None => Box::new(io::stdout()),
        };
        Ok(Self { out })
    }

    fn emit<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        Ok(())
    }
}

impl Drop for Metrics {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

fn text_encoder(cfg: &DiTConfig, dtype: DType, seed: u64) -> Result<TextEncoder> {
    TextEncoder::new(DEFAULT_VOCAB, DEFAULT_MAX_LEN, cfg.text_dim, dtype, &mut seeded_rng(seed ^ 0x7e87))
}

fn train_vae(common: &Common, clip: Option<&Path>, out: &Path) -> Result<()> {
    let mut cfg: TrainVaeConfig = load_config(common.config.as_deref())?;
    cfg.seed = effective_seed(cfg.seed)?;
    let dtype = cfg.precision.dtype();
    let clip = match clip {
        Some(p) => VideoClip::read_raw(p)?,
        None => moving_blob_clip(cfg.frames, cfg.size, cfg.size, cfg.seed as usize % cfg.size.max(1))?,
    };
    let vae = VideoVae::new(cfg.arch.clone(), dtype, cfg.seed)?;
    let mut trainer = VaeTrainer::new(vae, cfg.loss.clone(), cfg.lr, cfg.seed)?;
    let x = clip.to_tensor(dtype)?;
    let mut metrics = Metrics::open(common.metrics_out.as_deref())?;
    for _ in 0..cfg.steps {
        let m = trainer.train_step(&x)?;
        metrics.emit(&m)?;
    }
    let recon = VideoClip::from_tensor(&trainer.reconstruct(&x)?.clamp(-1.0, 1.0)?, clip.fps)?;
    metrics.emit(&eval_metrics(&clip, &recon)?)?;
    let mut ps = trainer.vae.params.to_parameter_set()?;
    ps.metadata.insert("model".into(), "vae".into());
    ps.metadata.insert("vae.arch".into(), serde_json::to_string(&cfg.arch)?);
    save_checkpoint(&ps, out)?;
    Ok(())
}

fn train_dit(common: &Common, out: &Path, allow_full: bool) -> Result<()> {
    let mut cfg: TrainDitConfig = load_config(common.config.as_deref())?;
    cfg.seed = effective_seed(cfg.seed)?;
    let model_cfg = resolve_dit(cfg.preset, cfg.model.as_ref(), allow_full)?;
    if cfg.batch == 0 || cfg.units == 0 {
        return Err(Error::Config("batch and units must be positive".into()));
    }
    let dtype = cfg.precision.dtype();
    let encoder = text_encoder(&model_cfg, dtype, cfg.seed)?;
    let prompts = vec![cfg.prompt.as_str(); cfg.batch];
    let cond = encoder.condition(&prompts, 24.0)?;
    let model = DiT::new(model_cfg.clone(), dtype, cfg.seed)?;
    let mut trainer = FlowTrainer::new(model, cfg.lr, cfg.weight_decay, cfg.seed)?;
    let policy = MaskPolicy {
        first_frame_prob: cfg.first_frame_prob,
    };
    let mut metrics = Metrics::open(common.metrics_out.as_deref())?;
    for step in 0..cfg.steps {
        let data_seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(step as u64);
        let latents = moving_square_latents(cfg.batch, cfg.units, cfg.grid[0], cfg.grid[1], model_cfg.c_z, data_seed)?
            .to_dtype(dtype)?;
        let batch = FlowBatch::draw(latents, cond.clone(), trainer.rng())?;
        let m = trainer.train_step(&batch, &policy, cfg.lr)?;
        metrics.emit(&m)?;
    }
    save_checkpoint(&trainer.model.to_parameter_set()?, out)?;
    Ok(())
}

fn expand(common: &Common, ckpt: &Path, out: &Path) -> Result<()> {
    let mut cfg: ExpandRunConfig = load_config(common.config.as_deref())?;
    cfg.seed = effective_seed(cfg.seed)?;
    let dtype = cfg.precision.dtype();
    let model = DiT::from_parameter_set(&load_checkpoint(ckpt)?, dtype)?;
    let ecfg = ExpansionConfig::new(cfg.e, cfg.eps_scale, cfg.bias_mode, cfg.seed)?;
    let wide = expand_dit(&model, &ecfg)?;
    let mut metrics = Metrics::open(common.metrics_out.as_deref())?;
    if cfg.verify_inputs > 0 {
        let inputs = random_dit_inputs(&model.config, cfg.verify_inputs, dtype, cfg.seed)?;
        let report = verify_preservation(&model, &wide, &inputs, cfg.tol)?;
        metrics.emit(&report)?;
    } else {
        metrics.emit(&serde_json::json!({
            "params_before": model.param_count(),
            "params_after": wide.param_count(),
        }))?;
    }
    save_checkpoint(&wide.to_parameter_set()?, out)?;
    Ok(())
}

/// Reads a `(U, h, w, C)` latent from a container holding a tensor named
/// `latent` or exactly one tensor.
pub fn read_latent(path: &Path, dtype: DType) -> Result<Tensor> {
    let ps = load_checkpoint(path)?;
    let t = match ps.get("latent") {
        Some(t) => t,
        None if ps.len() == 1 => ps.iter().next().map(|(_, t)| t).expect("one tensor"),
        None => {
            return Err(Error::Input(format!(
                "{}: expected one tensor or one named `latent`, found {}",
                path.display(),
                ps.len()
            )))
        }
    };
    let t = t.to_tensor(dtype, &candle_core::Device::Cpu)?;
    if t.rank() != 4 {
        return Err(Error::dim("latent", format!("{} must be (U, h, w, C), got {:?}", path.display(), t.dims())));
    }
    Ok(t)
}

struct FeedbackPool {
    pairs: Vec<(Tensor, Tensor)>,
    labels: Vec<(Tensor, bool)>,
}

fn feedback_from_file(prefs: &Path, dtype: DType) -> Result<FeedbackPool> {
    let base = prefs.parent().unwrap_or(Path::new("."));
    let load = |p: &Option<String>| read_latent(&base.join(p.as_deref().unwrap_or_default()), dtype);
    let mut pool = FeedbackPool {
        pairs: Vec::new(),
        labels: Vec::new(),
    };
    for r in read_preferences(prefs)? {
        match r.kind {
            RecordKind::Pair => pool.pairs.push((load(&r.winner)?, load(&r.loser)?)),
            RecordKind::Label => pool.labels.push((load(&r.sample)?, r.desirable.unwrap_or(false))),
        }
    }
    Ok(pool)
}

fn posttrain(common: &Common, ckpt: &Path, out: &Path, prefs: Option<&Path>) -> Result<()> {
    let mut cfg: PosttrainRunConfig = load_config(common.config.as_deref())?;
    cfg.seed = effective_seed(cfg.seed)?;
    cfg.post.validate()?;
    if cfg.batch == 0 || cfg.steps == 0 || cfg.merge_last == 0 {
        return Err(Error::Config("batch, steps and merge_last must be positive".into()));
    }
    let dtype = cfg.precision.dtype();
    let model = DiT::from_parameter_set(&load_checkpoint(ckpt)?, dtype)?;
    let encoder = text_encoder(&model.config, dtype, cfg.seed)?;
    let real = moving_square_latents(cfg.batch, cfg.units, cfg.grid[0], cfg.grid[1], model.config.c_z, cfg.seed)?
        .to_dtype(dtype)?;
    let cond = encoder.condition(&vec![cfg.prompt.as_str(); cfg.batch], 24.0)?;

    let pool = match prefs {
        Some(p) => feedback_from_file(p, dtype)?,
        None => {
            let pairs = rdpo_pairs(&model, &real, &cond, cfg.sampler_steps, cfg.seed)?;
            let mut labels = Vec::new();
            for p in &pairs {
                labels.push((p.winner.clone(), true));
                labels.push((p.loser.clone(), false));
            }
            FeedbackPool {
                pairs: pairs.into_iter().map(|p| (p.winner, p.loser)).collect(),
                labels,
            }
        }
    };
    for kind in &cfg.post.interleave {
        let empty = match kind {
            FeedbackKind::Dpo => pool.pairs.is_empty(),
            FeedbackKind::Kto => pool.labels.is_empty(),
        };
        if empty {
            return Err(Error::Input(format!("no {kind:?} feedback available for the interleave plan")));
        }
    }

    let schedule = LrSchedule {
        lr_start: cfg.lr_start,
        lr_end: cfg.lr_end,
        horizon: cfg.steps,
    };
    let mut trainer = PostTrainer::new(model, cfg.post.clone(), cfg.lr_start)?;
    let mut rng = seeded_rng(cfg.seed ^ 0x9057);
    let mut metrics = Metrics::open(common.metrics_out.as_deref())?;
    let mut recent: Vec<ParameterSet> = Vec::new();
    let take = |n: usize, step: usize| -> Vec<usize> { (0..cfg.batch).map(|i| (step * cfg.batch + i) % n).collect() };
    for step in 0..cfg.steps {
        let batch = match trainer.expected_kind() {
            FeedbackKind::Dpo => {
                let idx = take(pool.pairs.len(), step);
                let w: Vec<&Tensor> = idx.iter().map(|&i| &pool.pairs[i].0).collect();
                let l: Vec<&Tensor> = idx.iter().map(|&i| &pool.pairs[i].1).collect();
                FeedbackBatch::Dpo(PreferenceBatch::new(Tensor::stack(&w, 0)?, Tensor::stack(&l, 0)?, cond.clone(), &mut rng)?)
            }
            FeedbackKind::Kto => {
                let idx = take(pool.labels.len(), step);
                let s: Vec<&Tensor> = idx.iter().map(|&i| &pool.labels[i].0).collect();
                let d: Vec<bool> = idx.iter().map(|&i| pool.labels[i].1).collect();
                FeedbackBatch::Kto(LabeledBatch::new(Tensor::stack(&s, 0)?, d, cond.clone(), &mut rng)?)
            }
        };
        let sft = if cfg.post.alpha_sft > 0.0 {
            Some(FlowBatch::draw(real.clone(), cond.clone(), &mut rng)?)
        } else {
            None
        };
        let m = trainer.step(&batch, sft.as_ref(), anneal_lr(step, &schedule))?;
        metrics.emit(&m)?;
        recent.push(trainer.model.to_parameter_set()?);
        if recent.len() > cfg.merge_last {
            recent.remove(0);
        }
    }
    let mut merged = merge_checkpoints(&recent, cfg.post.gamma_merge)?;
    merged.metadata = recent.last().map(|p| p.metadata.clone()).unwrap_or_default();
    save_checkpoint(&merged, out)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct SampleSummary {
    count: usize,
    steps: usize,
    shape: Vec<usize>,
    mean: f64,
    std: f64,
}

fn sample_cmd(common: &Common, ckpt: &Path, steps: Option<usize>, prompt: Option<&str>, out: Option<&Path>) -> Result<()> {
    let mut cfg: SampleConfig = load_config(common.config.as_deref())?;
    if let Some(s) = steps {
        cfg.steps = s;
    }
    if cfg.steps == 0 {
        return Err(Error::Input("steps must be ≥ 1".into()));
    }
    if let Some(p) = prompt {
        cfg.prompt = p.to_string();
    }
    cfg.seed = effective_seed(cfg.seed)?;
    let dtype = cfg.precision.dtype();
    let model = DiT::from_parameter_set(&load_checkpoint(ckpt)?, dtype)?;
    let encoder = text_encoder(&model.config, dtype, cfg.seed)?;
    let cond = encoder.condition(&vec![cfg.prompt.as_str(); cfg.count], cfg.fps)?;
    let shape = [cfg.count, cfg.units, cfg.grid[0], cfg.grid[1], model.config.c_z];
    let x = sample(&model, shape, &cond, None, cfg.steps, cfg.seed, dtype)?;
    let flat = x.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    let n = flat.len() as f64;
    let mean = flat.iter().sum::<f64>() / n;
    let std = (flat.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if let Some(path) = out {
        let mut ps = ParameterSet::new();
        for i in 0..cfg.count {
            ps.insert(format!("sample.{i}"), NamedTensor::from_tensor(&x.get(i)?)?);
        }
        ps.metadata.insert("prompt".into(), cfg.prompt.clone());
        ps.metadata.insert("steps".into(), cfg.steps.to_string());
        save_checkpoint(&ps, path)?;
    }
    Metrics::open(common.metrics_out.as_deref())?.emit(&SampleSummary {
        count: cfg.count,
        steps: cfg.steps,
        shape: shape.to_vec(),
        mean,
        std,
    })
}

fn datapipe(action: &DatapipeAction) -> Result<()> {
    let DatapipeAction::Run {
        input,
        out,
        thresholds,
        tags,
        config,
    } = action;
    let mut cfg: PipelineConfig = load_config(config.as_deref())?;
    if let Some(p) = thresholds {
        cfg.thresholds = read_json::<FilterThresholds>(p)?;
    }
    let tags: BTreeMap<String, Vec<String>> = match tags {
        Some(p) => read_json(p)?,
        None => BTreeMap::new(),
    };
    let manifest = run_pipeline(input, &tags, &cfg)?;
    manifest.write_jsonl(out)?;
    print_json(&serde_json::json!({
        "records": manifest.records.len(),
        "kept": manifest.kept().count(),
        "warnings": manifest.warnings,
    }))
}

fn plan(model: &Path, cluster: &Path, microbatches: usize) -> Result<()> {
    let model: ModelCost = read_json(model)?;
    let cluster: ClusterSpec = read_json(cluster)?;
    print_json(&plan_parallelism(&model, &cluster, microbatches)?)
}

fn eval(reference: &Path, candidate: &Path) -> Result<()> {
    let a = VideoClip::read_raw(reference)?;
    let b = VideoClip::read_raw(candidate)?;
    print_json(&eval_metrics(&a, &b)?)
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::TrainVae { common, clip, out } => train_vae(common, clip.as_deref(), out),
        Command::TrainDit {
            common,
            out,
            allow_full,
        } => train_dit(common, out, *allow_full),
        Command::Expand { common, ckpt, out } => expand(common, ckpt, out),
        Command::Posttrain {
            common,
            ckpt,
            out,
            prefs,
        } => posttrain(common, ckpt, out, prefs.as_deref()),
        Command::Sample {
            common,
            ckpt,
            steps,
            prompt,
            out,
        } => sample_cmd(common, ckpt, *steps, prompt.as_deref(), out.as_deref()),
        Command::Datapipe { action } => datapipe(action),
        Command::Plan {
            model,
            cluster,
            microbatches,
        } => plan(model, cluster, *microbatches),
        Command::Eval { reference, candidate } => eval(reference, candidate),
    }
}

/// Exit status for an error: 1 for bad input or configuration, 2 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_validation() {
        1
    } else {
        2
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit status.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
