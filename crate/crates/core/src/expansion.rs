//! Width expansion of a trained transformer by tiling its parameters.
//!
//! A widened hidden vector is the original vector repeated `e` times. Every
//! hidden-to-hidden weight is tiled `e × e` and divided by `e`, so each output
//! block sees `Σ_c W'_{r,c} x = W x`. Perturbations `E_{r,c}` are drawn per row
//! block and centered across the column blocks, which keeps that sum intact
//! while giving the clones different gradients. Attention widens by
//! duplicating heads, so rotary geometry and the per-head norms are untouched.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dit::config::DiTConfig;
use crate::dit::model::{tensor_roles, Conditioning, DiT, TensorRole};
use crate::error::{Error, Result};
use crate::params::{seeded_rng, NamedTensor, ParamStore, ParameterSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    /// Biases tiled unchanged; replicated outputs stay exact.
    PreserveFunction,
    /// Biases tiled and divided by `e`.
    LiteralEq2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpansionConfig {
    pub e: usize,
    pub eps_scale: f64,
    pub bias_mode: BiasMode,
    pub seed: u64,
}

impl ExpansionConfig {
    pub fn new(e: usize, eps_scale: f64, bias_mode: BiasMode, seed: u64) -> Result<Self> {
        let c = Self {
            e,
            eps_scale,
            bias_mode,
            seed,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.e < 1 {
            return Err(Error::Config("expansion factor must be at least 1".into()));
        }
        if !(self.eps_scale >= 0.0 && self.eps_scale.is_finite()) {
            return Err(Error::Config(format!("eps_scale {} must be finite and non-negative", self.eps_scale)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerDeviation {
    pub layer: String,
    pub max_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpansionReport {
    pub layers: Vec<LayerDeviation>,
    pub global_max_deviation: f64,
    pub tol: f64,
    pub passed: bool,
    pub params_before: usize,
    pub params_after: usize,
}

impl ExpansionReport {
    pub fn param_ratio(&self) -> f64 {
        self.params_after as f64 / self.params_before.max(1) as f64
    }
}

/// Perturbations for `groups` row blocks of `e` column blocks with `n` entries each,
/// centered so every `(row block, entry)` sums to zero over its column blocks.
fn zero_sum_noise(rng: &mut ChaCha8Rng, groups: usize, e: usize, n: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; groups * e * n];
    if eps == 0.0 || e == 1 {
        return out;
    }
    for g in 0..groups {
        for i in 0..n {
            let draws: Vec<f64> = (0..e).map(|_| rng.random_range(-eps..=eps)).collect();
            let mean = draws.iter().sum::<f64>() / e as f64;
            for (c, d) in draws.iter().enumerate() {
                out[(g * e + c) * n + i] = d - mean;
            }
        }
    }
    out
}

fn tile_vec(v: &[f64], e: usize, scale: f64) -> Vec<f64> {
    (0..e).flat_map(|_| v.iter().map(|x| x * scale)).collect()
}

/// Expands a `(d_out, d_in)` weight (row-major `w`) and its bias to
/// `(e·d_out, e·d_in)` and `e·d_out`.
pub fn expand_linear(
    w: &[f64],
    d_out: usize,
    d_in: usize,
    b: Option<&[f64]>,
    config: &ExpansionConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    config.validate()?;
    if w.len() != d_out * d_in || b.is_some_and(|b| b.len() != d_out) {
        return Err(Error::dim("weight", format!("weight of {} for {d_out}×{d_in}", w.len())));
    }
    let w2 = expand_weight(w, d_out, d_in, TensorRole::Linear, config, rng)?;
    let b2 = b.map(|b| expand_bias(b, config));
    Ok((w2, b2))
}

fn expand_bias(b: &[f64], config: &ExpansionConfig) -> Vec<f64> {
    let scale = match config.bias_mode {
        BiasMode::PreserveFunction => 1.0,
        BiasMode::LiteralEq2 => 1.0 / config.e as f64,
    };
    tile_vec(b, config.e, scale)
}

fn expand_weight(
    w: &[f64],
    d_out: usize,
    d_in: usize,
    role: TensorRole,
    config: &ExpansionConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let e = config.e;
    let ef = e as f64;
    match role {
        TensorRole::Linear => {
            let noise = zero_sum_noise(rng, e, e, d_out * d_in, config.eps_scale);
            let cols = e * d_in;
            let mut out = vec![0.0; e * d_out * cols];
            for r in 0..e {
                for a in 0..d_out {
                    for c in 0..e {
                        for k in 0..d_in {
                            let eps = noise[(r * e + c) * d_out * d_in + a * d_in + k];
                            out[(r * d_out + a) * cols + c * d_in + k] = (w[a * d_in + k] - eps) / ef;
                        }
                    }
                }
            }
            Ok(out)
        }
        TensorRole::LinearIn => Ok(tile_vec(w, e, 1.0)),
        TensorRole::LinearOut => {
            let noise = zero_sum_noise(rng, 1, e, d_out * d_in, config.eps_scale);
            let cols = e * d_in;
            let mut out = vec![0.0; d_out * cols];
            for a in 0..d_out {
                for c in 0..e {
                    for k in 0..d_in {
                        let eps = noise[c * d_out * d_in + a * d_in + k];
                        out[a * cols + c * d_in + k] = (w[a * d_in + k] - eps) / ef;
                    }
                }
            }
            Ok(out)
        }
        other => Err(Error::Config(format!("{other:?} is not a weight role"))),
    }
}

fn expand_tensor(name: &str, t: &NamedTensor, role: TensorRole, config: &ExpansionConfig, rng: &mut ChaCha8Rng) -> Result<NamedTensor> {
    let e = config.e;
    let v = t.data.to_f64();
    let shape = &t.shape;
    let need_rank = |r: usize| -> Result<()> {
        if shape.len() == r {
            Ok(())
        } else {
            Err(Error::Config(format!("tensor {name} with role {role:?} has rank {}, expected {r}", shape.len())))
        }
    };
    let (new_shape, values) = match role {
        TensorRole::Linear | TensorRole::LinearIn | TensorRole::LinearOut => {
            need_rank(2)?;
            let (o, i) = (shape[0], shape[1]);
            let w = expand_weight(&v, o, i, role, config, rng)?;
            let s = match role {
                TensorRole::Linear => vec![e * o, e * i],
                TensorRole::LinearIn => vec![e * o, i],
                _ => vec![o, e * i],
            };
            (s, w)
        }
        TensorRole::Bias => {
            need_rank(1)?;
            (vec![e * shape[0]], expand_bias(&v, config))
        }
        TensorRole::NormGain => {
            need_rank(1)?;
            (vec![e * shape[0]], tile_vec(&v, e, 1.0))
        }
        TensorRole::RowTiled => {
            need_rank(2)?;
            let (k, h) = (shape[0], shape[1]);
            let rows = (0..k).flat_map(|r| tile_vec(&v[r * h..(r + 1) * h], e, 1.0)).collect();
            (vec![k, e * h], rows)
        }
        TensorRole::FixedBias | TensorRole::Fixed => (shape.clone(), v),
    };
    NamedTensor::new(new_shape, t.data.like(values))
}

/// Expands every tensor by its role. Names missing from `roles` are rejected.
pub fn expand_model(params: &ParameterSet, roles: &BTreeMap<String, TensorRole>, config: &ExpansionConfig) -> Result<ParameterSet> {
    config.validate()?;
    let unknown: Vec<&str> = params.names().filter(|n| !roles.contains_key(*n)).map(String::as_str).collect();
    if !unknown.is_empty() {
        return Err(Error::Config(format!("no expansion role for tensors: {}", unknown.join(", "))));
    }
    let mut rng = seeded_rng(config.seed);
    let mut out = ParameterSet::new();
    out.metadata = params.metadata.clone();
    // BTreeMap order makes the draw sequence, and so the result, seed-determined
    for (name, t) in params.iter() {
        out.insert(name.clone(), expand_tensor(name, t, roles[name], config, &mut rng)?);
    }
    Ok(out)
}

pub fn expanded_config(config: &DiTConfig, e: usize) -> DiTConfig {
    DiTConfig {
        hidden: config.hidden * e,
        heads: config.heads * e,
        ..config.clone()
    }
}

/// Expands a DiT, returning the wider model in the same precision.
pub fn expand_dit(model: &DiT, config: &ExpansionConfig) -> Result<DiT> {
    let ps = model.params.to_parameter_set()?;
    let mut wide = expand_model(&ps, &tensor_roles(&model.config), config)?;
    let new_cfg = expanded_config(&model.config, config.e);
    wide.metadata.insert("dit.config".into(), serde_json::to_string(&new_cfg)?);
    DiT::from_store(new_cfg, ParamStore::from_parameter_set(&wide, model.dtype())?)
}

/// A model that can report per-layer outputs for paired comparison.
pub trait Layered {
    type Input;
    fn layer_outputs(&self, input: &Self::Input) -> Result<Vec<(String, Tensor)>>;
}

pub struct DiTInput {
    pub latents: Tensor,
    pub timesteps: Tensor,
    pub cond: Conditioning,
}

impl Layered for DiT {
    type Input = DiTInput;
    fn layer_outputs(&self, input: &DiTInput) -> Result<Vec<(String, Tensor)>> {
        Ok(self.forward_trace(&input.latents, &input.timesteps, &input.cond)?.1)
    }
}

/// A single affine layer whose input is the original vector repeated `input_copies` times.
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub input_copies: usize,
}

impl Layered for LinearLayer {
    type Input = Tensor;
    fn layer_outputs(&self, x: &Tensor) -> Result<Vec<(String, Tensor)>> {
        let copies = vec![x.clone(); self.input_copies];
        let xr = Tensor::cat(&copies, x.rank() - 1)?;
        let y = xr.broadcast_matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?;
        Ok(vec![("linear".into(), y)])
    }
}

/// Runs both models on each input and compares every layer. A wider layer is
/// compared block by block against the original.
pub fn verify_preservation<M: Layered + ParamCount>(
    orig: &M,
    expanded: &M,
    inputs: &[M::Input],
    tol: f64,
) -> Result<ExpansionReport> {
    let mut worst: BTreeMap<String, f64> = BTreeMap::new();
    let mut order = Vec::new();
    for input in inputs {
        let a = orig.layer_outputs(input)?;
        let b = expanded.layer_outputs(input)?;
        if a.len() != b.len() {
            return Err(Error::Config(format!("{} layers vs {} layers", a.len(), b.len())));
        }
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            if na != nb {
                return Err(Error::Config(format!("layer {na} paired with {nb}")));
            }
            let dev = block_deviation(na, ta, tb)?;
            let slot = worst.entry(na.clone()).or_insert_with(|| {
                order.push(na.clone());
                0.0
            });
            *slot = slot.max(dev);
        }
    }
    let layers: Vec<LayerDeviation> = order
        .into_iter()
        .map(|layer| LayerDeviation {
            max_deviation: worst[&layer],
            layer,
        })
        .collect();
    let global = layers.iter().map(|l| l.max_deviation).fold(0.0, f64::max);
    Ok(ExpansionReport {
        global_max_deviation: global,
        tol,
        passed: global <= tol,
        params_before: orig.param_count(),
        params_after: expanded.param_count(),
        layers,
    })
}

pub trait ParamCount {
    fn param_count(&self) -> usize;
}

impl ParamCount for DiT {
    fn param_count(&self) -> usize {
        DiT::param_count(self)
    }
}

impl ParamCount for LinearLayer {
    fn param_count(&self) -> usize {
        self.weight.elem_count() + self.bias.elem_count()
    }
}

fn block_deviation(name: &str, a: &Tensor, b: &Tensor) -> Result<f64> {
    let (da, db) = (a.dims(), b.dims());
    let last = da.len().saturating_sub(1);
    let compatible = da.len() == db.len() && da[..last] == db[..last] && da[last] > 0 && db[last] % da[last] == 0;
    if !compatible {
        return Err(Error::Config(format!("layer {name}: shapes {da:?} and {db:?} do not pair")));
    }
    let w = da[last];
    let av = a.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let bv = b.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let e = db[last] / w;
    let mut max = 0.0f64;
    for (row, arow) in av.chunks(w).enumerate() {
        let brow = &bv[row * w * e..(row + 1) * w * e];
        for block in brow.chunks(w) {
            for (x, y) in arow.iter().zip(block) {
                max = max.max((x - y).abs());
            }
        }
    }
    Ok(max)
}

/// Builds `n` random inputs for a DiT from a seed.
pub fn random_dit_inputs(config: &DiTConfig, n: usize, dtype: DType, seed: u64) -> Result<Vec<DiTInput>> {
    use crate::params::randn;
    let mut rng = seeded_rng(seed);
    (0..n)
        .map(|_| {
            let latents = randn(&mut rng, &[1, 2, 4, 4, config.c_z], dtype, &Device::Cpu)?;
            let t: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..=1.0)).collect();
            let timesteps = Tensor::from_vec(t, (1, 8), &Device::Cpu)?.to_dtype(dtype)?;
            let text = randn(&mut rng, &[1, 3, config.text_dim], dtype, &Device::Cpu)?;
            let fps = rng.random_range(8.0..=30.0f64).round();
            Ok(DiTInput {
                latents,
                timesteps,
                cond: Conditioning {
                    text,
                    text_mask: None,
                    fps: vec![fps],
                },
            })
        })
        .collect()
}
