//! Diffusion transformer over patchified latent grids.
//!
//! Block layout, with `g` the per-token global vector and `s_k` the block's
//! learned scale rows:
//!
//! ```text
//! x += (g·s2) ⊙ SelfAttn(norm1(x)·(1 + g·s1) + g·s0)
//! x += CrossAttn(norm2(x), text)
//! x += (g·s5) ⊙ Mlp(norm3(x)·(1 + g·s4) + g·s3)
//! ```
//!
//! Weights are stored `(out, in)`. All norms are RMS norms with a learned gain.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, D};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dit::config::DiTConfig;
use crate::dit::patch::{patchify, unpatchify, TokenGrid};
use crate::dit::rope::Rope3d;
use crate::error::{Error, Result};
use crate::params::{seeded_rng, ParamStore, ParameterSet};

const NORM_EPS: f64 = 1e-6;
const MASK_NEG: f64 = -1e9;

/// How a tensor is widened when the hidden size is multiplied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TensorRole {
    /// `(out, in)` with both sides in the hidden space.
    Linear,
    /// `(out, in)` whose input is not widened (patch, time, text inputs).
    LinearIn,
    /// `(out, in)` whose output is not widened (the output head).
    LinearOut,
    /// Bias of a widened output.
    Bias,
    /// Bias of an output that is not widened.
    FixedBias,
    /// Gain of a norm over the hidden axis.
    NormGain,
    /// `(k, hidden)`: every row is tiled along hidden.
    RowTiled,
    /// Copied unchanged (per-head-dim gains).
    Fixed,
}

/// Conditioning shared by every token of a sample.
#[derive(Debug, Clone)]
pub struct Conditioning {
    /// `(B, L, text_dim)`.
    pub text: Tensor,
    /// `(B, L)`, 1 for real tokens and 0 for padding.
    pub text_mask: Option<Tensor>,
    /// Frame rate per sample.
    pub fps: Vec<f64>,
}

impl Conditioning {
    pub fn batch(&self) -> usize {
        self.fps.len()
    }

    /// Rows `start..start+len` of the batch.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        Ok(Self {
            text: self.text.narrow(0, start, len)?,
            text_mask: self.text_mask.as_ref().map(|m| m.narrow(0, start, len)).transpose()?,
            fps: self.fps[start..start + len].to_vec(),
        })
    }
}

/// Output of the global-signal pathway.
#[derive(Debug, Clone)]
pub struct GlobalModulation {
    /// `(B, N, hidden)`.
    pub per_token: Tensor,
    /// One `(6, hidden)` tensor per block.
    pub block_scales: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct DiT {
    pub config: DiTConfig,
    pub params: ParamStore,
    rope: Rope3d,
}

pub fn rms_norm(x: &Tensor, gain: &Tensor) -> Result<Tensor> {
    let ms = x.sqr()?.mean_keepdim(D::Minus1)?;
    let y = x.broadcast_div(&(ms + NORM_EPS)?.sqrt()?)?;
    Ok(y.broadcast_mul(gain)?)
}

/// Sinusoidal features `(…, dim)` of a scalar tensor.
pub fn sinusoid(x: &Tensor, dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|j| (-(10_000f64.ln()) * j as f64 / half as f64).exp())
        .collect();
    let freqs = Tensor::from_vec(freqs, half, x.device())?.to_dtype(x.dtype())?;
    let arg = x.unsqueeze(D::Minus1)?.broadcast_mul(&freqs)?;
    Ok(Tensor::cat(&[arg.cos()?, arg.sin()?], D::Minus1)?)
}

fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::silu(x)?)
}

impl DiT {
    pub fn new(config: DiTConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let mut params = ParamStore::new(dtype);
        for (name, role) in tensor_roles(&config) {
            let shape = tensor_shape(&config, &name)?;
            init_tensor(&mut params, &mut rng, &name, role, &shape)?;
        }
        Self::from_store(config, params)
    }

    pub fn from_store(config: DiTConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let roles = tensor_roles(&config);
        for name in roles.keys() {
            let t = params.get(name).map_err(|_| Error::Config(format!("missing DiT tensor {name}")))?;
            let want = tensor_shape(&config, name)?;
            if t.dims() != want.as_slice() {
                return Err(Error::Config(format!("tensor {name} has shape {:?}, expected {want:?}", t.dims())));
            }
        }
        if let Some(extra) = params.names().find(|n| !roles.contains_key(*n)) {
            return Err(Error::Config(format!("unknown DiT tensor {extra}")));
        }
        let rope = Rope3d::new(config.rope_split, config.rope_base)?;
        Ok(Self { config, params, rope })
    }

    pub fn from_parameter_set(ps: &ParameterSet, dtype: DType) -> Result<Self> {
        let cfg = ps
            .metadata
            .get("dit.config")
            .ok_or_else(|| Error::Config("checkpoint has no dit.config metadata".into()))?;
        let config: DiTConfig = serde_json::from_str(cfg)?;
        Self::from_store(config, ParamStore::from_parameter_set(ps, dtype)?)
    }

    pub fn to_parameter_set(&self) -> Result<ParameterSet> {
        let mut ps = self.params.to_parameter_set()?;
        ps.metadata.insert("model".into(), "dit".into());
        ps.metadata.insert("dit.config".into(), serde_json::to_string(&self.config)?);
        Ok(ps)
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    fn p(&self, name: &str) -> Result<Tensor> {
        self.params.get(name)
    }

    fn linear(&self, x: &Tensor, prefix: &str) -> Result<Tensor> {
        let w = self.p(&format!("{prefix}.weight"))?;
        let b = self.p(&format!("{prefix}.bias"))?;
        Ok(x.broadcast_matmul(&w.t()?)?.broadcast_add(&b)?)
    }

    /// Per-token global vectors from timesteps `(B, N)` and per-sample fps.
    pub fn global_embed(&self, timesteps: &Tensor, fps: &[f64]) -> Result<GlobalModulation> {
        let (b, n) = timesteps.dims2()?;
        if fps.len() != b {
            return Err(Error::dim("batch", format!("{} fps values for batch {b}", fps.len())));
        }
        let dtype = self.dtype();
        let ts = timesteps.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        if let Some(bad) = ts.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Input(format!("timestep {bad} outside [0, 1]")));
        }
        let mlp = |x: &Tensor| -> Result<Tensor> {
            let h = silu(&self.linear(x, "global.fc1")?)?;
            self.linear(&h, "global.fc2")
        };
        let t_feat = sinusoid(&(timesteps.to_dtype(dtype)? * 1000.0)?, self.config.freq_dim)?;
        let fps_t = Tensor::from_vec(fps.to_vec(), (b, 1), &Device::Cpu)?.to_dtype(dtype)?;
        let fps_feat = sinusoid(&fps_t, self.config.freq_dim)?;
        let per_token = mlp(&t_feat)?.broadcast_add(&mlp(&fps_feat)?)?;
        debug_assert_eq!(per_token.dims(), &[b, n, self.config.hidden]);
        let block_scales = (0..self.config.depth)
            .map(|i| self.p(&format!("blocks.{i}.mod_scale")))
            .collect::<Result<Vec<_>>>()?;
        Ok(GlobalModulation { per_token, block_scales })
    }

    fn heads_view(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, width) = x.dims3()?;
        let hd = self.config.head_dim;
        Ok(x.reshape((b, n, width / hd, hd))?.transpose(1, 2)?.contiguous()?)
    }

    fn merge_heads(x: &Tensor) -> Result<Tensor> {
        let (b, h, n, hd) = x.dims4()?;
        Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, n, h * hd))?)
    }

    fn self_attention(&self, x: &Tensor, i: usize, rope: &(Tensor, Tensor)) -> Result<Tensor> {
        let pre = format!("blocks.{i}.attn");
        let q = self.heads_view(&self.linear(x, &format!("{pre}.wq"))?)?;
        let k = self.heads_view(&self.linear(x, &format!("{pre}.wk"))?)?;
        let v = self.heads_view(&self.linear(x, &format!("{pre}.wv"))?)?;
        let q = rms_norm(&q, &self.p(&format!("{pre}.q_norm.gain"))?)?;
        let k = rms_norm(&k, &self.p(&format!("{pre}.k_norm.gain"))?)?;
        let q = self.rope.apply(&q, &rope.0, &rope.1)?;
        let k = self.rope.apply(&k, &rope.0, &rope.1)?;
        let scale = 1.0 / (self.config.head_dim as f64).sqrt();
        let logits = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let attn = candle_nn::ops::softmax(&logits, D::Minus1)?;
        let o = Self::merge_heads(&attn.matmul(&v)?)?;
        self.linear(&o, &format!("{pre}.wo"))
    }

    fn cross_attention(&self, x: &Tensor, i: usize, cond: &Conditioning) -> Result<Tensor> {
        let pre = format!("blocks.{i}.cross");
        let q = self.heads_view(&self.linear(x, &format!("{pre}.wq"))?)?;
        let k = self.heads_view(&self.linear(&cond.text, &format!("{pre}.wk"))?)?;
        let v = self.heads_view(&self.linear(&cond.text, &format!("{pre}.wv"))?)?;
        let scale = 1.0 / (self.config.head_dim as f64).sqrt();
        let mut logits = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        if let Some(mask) = &cond.text_mask {
            let (b, l) = mask.dims2()?;
            let bias = ((mask.to_dtype(logits.dtype())? - 1.0)? * -MASK_NEG)?.reshape((b, 1, 1, l))?;
            logits = logits.broadcast_add(&bias)?;
        }
        let attn = candle_nn::ops::softmax(&logits, D::Minus1)?;
        let o = Self::merge_heads(&attn.matmul(&v)?)?;
        self.linear(&o, &format!("{pre}.wo"))
    }

    fn block(&self, x: &Tensor, i: usize, g: &Tensor, cond: &Conditioning, rope: &(Tensor, Tensor)) -> Result<Tensor> {
        let s = self.p(&format!("blocks.{i}.mod_scale"))?;
        let m = |k: usize| -> Result<Tensor> { Ok(g.broadcast_mul(&s.get(k)?)?) };

        let h = rms_norm(x, &self.p(&format!("blocks.{i}.norm1.gain"))?)?;
        let h = (h.broadcast_mul(&(m(1)? + 1.0)?)? + m(0)?)?;
        let x = (x + m(2)?.mul(&self.self_attention(&h, i, rope)?)?)?;

        let h = rms_norm(&x, &self.p(&format!("blocks.{i}.norm2.gain"))?)?;
        let x = (&x + self.cross_attention(&h, i, cond)?)?;

        let h = rms_norm(&x, &self.p(&format!("blocks.{i}.norm3.gain"))?)?;
        let h = (h.broadcast_mul(&(m(4)? + 1.0)?)? + m(3)?)?;
        let h = self.linear(&h, &format!("blocks.{i}.mlp.fc1"))?.gelu()?;
        let h = self.linear(&h, &format!("blocks.{i}.mlp.fc2"))?;
        Ok((&x + m(5)?.mul(&h)?)?)
    }

    fn check_inputs(&self, grid: &TokenGrid, timesteps: &Tensor, cond: &Conditioning) -> Result<usize> {
        let (b, n, d) = grid.tokens.dims3()?;
        if d != self.config.patch_dim() {
            return Err(Error::dim("channels", format!("patch width {d}, model expects {}", self.config.patch_dim())));
        }
        if timesteps.dims() != [b, n] {
            return Err(Error::dim("timesteps", format!("timesteps {:?} for {b}×{n} tokens", timesteps.dims())));
        }
        let (tb, _, td) = cond.text.dims3()?;
        if tb != b || cond.batch() != b {
            return Err(Error::dim("batch", format!("text batch {tb}, fps batch {}, latent batch {b}", cond.batch())));
        }
        if td != self.config.text_dim {
            return Err(Error::dim("text_dim", format!("text width {td}, model expects {}", self.config.text_dim)));
        }
        Ok(b)
    }

    /// Velocity prediction for latents `(B, U, h, w, C_z)` with per-token timesteps `(B, N)`.
    pub fn forward(&self, latents: &Tensor, timesteps: &Tensor, cond: &Conditioning) -> Result<Tensor> {
        self.run(latents, timesteps, cond, None)
    }

    /// Like [`DiT::forward`], also returning the hidden state after each stage.
    pub fn forward_trace(
        &self,
        latents: &Tensor,
        timesteps: &Tensor,
        cond: &Conditioning,
    ) -> Result<(Tensor, Vec<(String, Tensor)>)> {
        let mut trace = Vec::new();
        let out = self.run(latents, timesteps, cond, Some(&mut trace))?;
        Ok((out, trace))
    }

    fn run(
        &self,
        latents: &Tensor,
        timesteps: &Tensor,
        cond: &Conditioning,
        mut trace: Option<&mut Vec<(String, Tensor)>>,
    ) -> Result<Tensor> {
        if latents.rank() != 5 {
            return Err(Error::dim("rank", format!("expected (B, U, h, w, C) latents, got {:?}", latents.dims())));
        }
        let grid = patchify(latents)?;
        self.check_inputs(&grid, timesteps, cond)?;
        let mut record = |name: String, t: &Tensor| {
            if let Some(tr) = trace.as_deref_mut() {
                tr.push((name, t.clone()));
            }
        };
        let rope = self.rope.tables(&grid.coords, self.dtype(), &Device::Cpu)?;
        let global = self.global_embed(timesteps, &cond.fps)?;
        record("global".into(), &global.per_token);
        let g = &global.per_token;

        let mut x = self.linear(&grid.tokens, "patch_embed")?;
        record("patch_embed".into(), &x);
        for i in 0..self.config.depth {
            x = self.block(&x, i, g, cond, &rope)?;
            record(format!("blocks.{i}"), &x);
        }
        let s = self.p("final.mod_scale")?;
        let h = rms_norm(&x, &self.p("final.norm.gain")?)?;
        let h = (h.broadcast_mul(&(g.broadcast_mul(&s.get(1)?)? + 1.0)?)? + g.broadcast_mul(&s.get(0)?)?)?;
        let out_tokens = self.linear(&h, "final.head")?;
        let out = unpatchify(
            &TokenGrid {
                tokens: out_tokens,
                coords: grid.coords,
                dims: grid.dims,
            },
            self.config.c_z,
        )?;
        record("output".into(), &out);
        Ok(out)
    }
}

/// Raw pre-softmax self-attention logits after QK normalization, for `(…, N, head_dim)` inputs.
pub fn qk_logits(q: &Tensor, k: &Tensor, q_gain: &Tensor, k_gain: &Tensor) -> Result<Tensor> {
    let hd = q.dims()[q.rank() - 1];
    let q = rms_norm(q, q_gain)?;
    let k = rms_norm(k, k_gain)?;
    Ok((q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?)
}

/// Role of every tensor of a model with this configuration.
pub fn tensor_roles(config: &DiTConfig) -> BTreeMap<String, TensorRole> {
    use TensorRole::*;
    let mut roles = BTreeMap::new();
    let lin = |roles: &mut BTreeMap<String, TensorRole>, prefix: &str, w: TensorRole| {
        let b = if w == LinearOut { FixedBias } else { Bias };
        roles.insert(format!("{prefix}.weight"), w);
        roles.insert(format!("{prefix}.bias"), b);
    };
    lin(&mut roles, "patch_embed", LinearIn);
    lin(&mut roles, "global.fc1", LinearIn);
    lin(&mut roles, "global.fc2", Linear);
    for i in 0..config.depth {
        let p = format!("blocks.{i}");
        roles.insert(format!("{p}.mod_scale"), RowTiled);
        for n in ["norm1", "norm2", "norm3"] {
            roles.insert(format!("{p}.{n}.gain"), NormGain);
        }
        for w in ["wq", "wk", "wv", "wo"] {
            lin(&mut roles, &format!("{p}.attn.{w}"), Linear);
        }
        roles.insert(format!("{p}.attn.q_norm.gain"), Fixed);
        roles.insert(format!("{p}.attn.k_norm.gain"), Fixed);
        lin(&mut roles, &format!("{p}.cross.wq"), Linear);
        lin(&mut roles, &format!("{p}.cross.wk"), LinearIn);
        lin(&mut roles, &format!("{p}.cross.wv"), LinearIn);
        lin(&mut roles, &format!("{p}.cross.wo"), Linear);
        lin(&mut roles, &format!("{p}.mlp.fc1"), Linear);
        lin(&mut roles, &format!("{p}.mlp.fc2"), Linear);
    }
    roles.insert("final.mod_scale".into(), RowTiled);
    roles.insert("final.norm.gain".into(), NormGain);
    lin(&mut roles, "final.head", LinearOut);
    roles
}

/// Shape of a named tensor under `config`.
pub fn tensor_shape(config: &DiTConfig, name: &str) -> Result<Vec<usize>> {
    let h = config.hidden;
    let unknown = || Error::Config(format!("unknown DiT tensor {name}"));
    let (stem, leaf) = name.rsplit_once('.').ok_or_else(unknown)?;
    let local = match stem.strip_prefix("blocks.") {
        Some(rest) => rest.split_once('.').map(|(_, l)| l).unwrap_or(""),
        None => stem,
    };
    let (out, inp) = match local {
        "patch_embed" => (h, config.patch_dim()),
        "global.fc1" => (h, config.freq_dim),
        "global.fc2" | "attn.wq" | "attn.wk" | "attn.wv" | "attn.wo" | "cross.wq" | "cross.wo" => (h, h),
        "cross.wk" | "cross.wv" => (h, config.text_dim),
        "mlp.fc1" => (config.mlp_hidden(), h),
        "mlp.fc2" => (h, config.mlp_hidden()),
        "final.head" => (config.patch_dim(), h),
        "norm1" | "norm2" | "norm3" | "final.norm" => return Ok(vec![h]),
        "attn.q_norm" | "attn.k_norm" => return Ok(vec![config.head_dim]),
        _ if leaf == "mod_scale" => {
            return Ok(if stem == "final" { vec![2, h] } else { vec![6, h] });
        }
        _ => return Err(unknown()),
    };
    match leaf {
        "weight" => Ok(vec![out, inp]),
        "bias" => Ok(vec![out]),
        _ => Err(unknown()),
    }
}

fn init_tensor(params: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, role: TensorRole, shape: &[usize]) -> Result<()> {
    match role {
        TensorRole::Linear | TensorRole::LinearIn | TensorRole::LinearOut => {
            params.normal(rng, name, shape, 1.0 / (shape[1] as f64).sqrt())
        }
        TensorRole::Bias | TensorRole::FixedBias => params.normal(rng, name, shape, 0.02),
        TensorRole::NormGain | TensorRole::Fixed => params.constant(name, shape, 1.0),
        TensorRole::RowTiled => params.normal(rng, name, shape, 0.5),
    }
}
