//! Chunk-local video encoder and windowed decoder.
//!
//! The encoder folds every 8-frame chunk into the batch axis before any
//! convolution runs, so no operation ever sees two chunks at once. Each of
//! the three downsampling stages is a strided 2D spatial convolution followed
//! by a strided temporal convolution, for a total factor of `8 × 8 × 8`.

use candle_core::{DType, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{randn, seeded_rng, ParamStore, ParameterSet};
use crate::videovae::clip::VideoClip;

/// Frames per latent unit.
pub const CHUNK: usize = 8;
/// Decoder windows the decoder accepts.
pub const DECODE_WINDOWS: [usize; 3] = [1, 4, 8];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeArch {
    pub in_channels: usize,
    pub c_z: usize,
    pub enc_channels: [usize; 3],
    pub dec_channels: [usize; 3],
    pub disc_channels: [usize; 2],
}

impl Default for VaeArch {
    fn default() -> Self {
        Self {
            in_channels: 3,
            c_z: 24,
            enc_channels: [32, 48, 64],
            dec_channels: [64, 64, 48],
            disc_channels: [16, 32],
        }
    }
}

/// How latent units are drawn from the posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// Units equal the posterior mean.
    Deterministic,
    /// Reparameterized draw with the given seed.
    Sample(u64),
}

/// Latent units `(U, H/8, W/8, C_z)` with their posterior statistics.
#[derive(Debug, Clone)]
pub struct LatentSequence {
    pub units: Tensor,
    pub post_mean: Tensor,
    pub post_logvar: Tensor,
}

impl LatentSequence {
    pub fn num_units(&self) -> usize {
        self.units.dims()[0]
    }
}

/// Parameters of the encoder, posterior head, decoder and critic, stored
/// under the `encoder.`, `posterior_head.`, `decoder.` and `discriminator.`
/// prefixes.
#[derive(Debug, Clone)]
pub struct VideoVae {
    pub arch: VaeArch,
    pub params: ParamStore,
}

fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let y = x.conv2d(w, pad, stride, 1, 1)?;
    let c = b.dims()[0];
    Ok(y.broadcast_add(&b.reshape((1, c, 1, 1))?)?)
}

/// Kernel-3 temporal convolution over frames laid out as `(n · t, ch, h, w)`,
/// zero padded by one frame on each side. Written as three shifted matmuls.
fn temporal_conv(x: &Tensor, n: usize, t: usize, w: &Tensor, b: &Tensor, stride: usize) -> Result<(Tensor, usize)> {
    let (_, ch, hh, ww) = x.dims4()?;
    let out_ch = w.dims()[0];
    let t_out = (t - 1) / stride + 1;
    let rows = n * hh * ww;
    let seq = x
        .reshape((n, t, ch, hh, ww))?
        .permute((0, 3, 4, 1, 2))?
        .contiguous()?
        .reshape((rows, t, ch))?
        .pad_with_zeros(1, 1, 1)?;
    let mut y: Option<Tensor> = None;
    for k in 0..3 {
        let taps = if stride == 1 {
            seq.narrow(1, k, t_out)?
        } else {
            let span = seq.narrow(1, k, (t_out - 1) * stride + 1)?.pad_with_zeros(1, 0, stride - 1)?;
            span.reshape((rows, t_out, stride, ch))?.narrow(2, 0, 1)?.squeeze(2)?
        };
        let wk = w.narrow(2, k, 1)?.squeeze(2)?.t()?;
        let term = taps.reshape((rows * t_out, ch))?.matmul(&wk)?;
        y = Some(match y {
            None => term,
            Some(acc) => (acc + term)?,
        });
    }
    let y = y.expect("three taps").broadcast_add(&b.reshape((1, out_ch))?)?;
    let y = y
        .reshape((n, hh, ww, t_out, out_ch))?
        .permute((0, 3, 4, 1, 2))?
        .contiguous()?
        .reshape((n * t_out, out_ch, hh, ww))?;
    Ok((y, t_out))
}

/// Nearest-neighbour 2× upsampling in time for frames `(n · t, ch, h, w)`.
fn temporal_upsample(x: &Tensor, n: usize, t: usize) -> Result<Tensor> {
    let (_, ch, hh, ww) = x.dims4()?;
    Ok(x.reshape((n, t, 1, ch, hh, ww))?
        .broadcast_as((n, t, 2, ch, hh, ww))?
        .contiguous()?
        .reshape((n * t * 2, ch, hh, ww))?)
}

/// Nearest-neighbour 2× spatial upsampling through broadcasting.
fn spatial_upsample(x: &Tensor) -> Result<Tensor> {
    let (b, ch, hh, ww) = x.dims4()?;
    Ok(x.reshape((b, ch, hh, 1, ww, 1))?
        .broadcast_as((b, ch, hh, 2, ww, 2))?
        .contiguous()?
        .reshape((b, ch, hh * 2, ww * 2))?)
}

fn leaky(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&x.affine(0.2, 0.0)?)?)
}

impl VideoVae {
    pub fn new(arch: VaeArch, dtype: DType, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed);
        let mut params = ParamStore::new(dtype);
        let conv = |p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, shape: &[usize]| -> Result<()> {
            let fan_in: usize = shape[1..].iter().product();
            p.normal(rng, &format!("{name}.weight"), shape, (1.0 / fan_in as f64).sqrt())?;
            p.zeros(&format!("{name}.bias"), &shape[..1])
        };
        let mut ch_in = arch.in_channels;
        for (i, &ch) in arch.enc_channels.iter().enumerate() {
            conv(&mut params, &mut rng, &format!("encoder.stage{i}.spatial"), &[ch, ch_in, 3, 3])?;
            conv(&mut params, &mut rng, &format!("encoder.stage{i}.temporal"), &[ch, ch, 3])?;
            ch_in = ch;
        }
        conv(&mut params, &mut rng, "posterior_head", &[2 * arch.c_z, ch_in, 1, 1])?;

        let d = arch.dec_channels;
        conv(&mut params, &mut rng, "decoder.conv_in", &[d[0], arch.c_z, 3, 3])?;
        conv(&mut params, &mut rng, "decoder.stage0.temporal", &[d[0], d[0], 3])?;
        conv(&mut params, &mut rng, "decoder.stage0.spatial", &[d[1], d[0], 3, 3])?;
        conv(&mut params, &mut rng, "decoder.stage1.temporal", &[d[1], d[1], 3])?;
        conv(&mut params, &mut rng, "decoder.stage1.spatial", &[d[2], d[1], 3, 3])?;
        conv(&mut params, &mut rng, "decoder.stage2.temporal", &[d[2], d[2], 3])?;
        conv(&mut params, &mut rng, "decoder.conv_out", &[arch.in_channels, d[2], 3, 3])?;

        let [c0, c1] = arch.disc_channels;
        conv(&mut params, &mut rng, "discriminator.conv0", &[c0, arch.in_channels, 4, 4])?;
        conv(&mut params, &mut rng, "discriminator.conv1", &[c1, c0, 4, 4])?;
        conv(&mut params, &mut rng, "discriminator.conv2", &[1, c1, 3, 3])?;
        Ok(Self { arch, params })
    }

    pub fn from_parameter_set(arch: VaeArch, ps: &ParameterSet, dtype: DType) -> Result<Self> {
        let params = ParamStore::from_parameter_set(ps, dtype)?;
        let reference = VideoVae::new(arch.clone(), dtype, 0)?;
        for name in reference.params.names() {
            if !params.contains(name) {
                return Err(Error::Config(format!("checkpoint lacks VAE tensor `{name}`")));
            }
        }
        Ok(Self { arch, params })
    }

    fn p(&self, name: &str) -> Result<Tensor> {
        self.params.get(name)
    }

    fn conv(&self, x: &Tensor, name: &str, stride: usize, pad: usize) -> Result<Tensor> {
        conv2d(x, &self.p(&format!("{name}.weight"))?, &self.p(&format!("{name}.bias"))?, stride, pad)
    }

    fn tconv(&self, x: &Tensor, n: usize, t: usize, name: &str, stride: usize) -> Result<(Tensor, usize)> {
        temporal_conv(x, n, t, &self.p(&format!("{name}.weight"))?, &self.p(&format!("{name}.bias"))?, stride)
    }

    fn check_clip_dims(&self, t: usize, c: usize, h: usize, w: usize) -> Result<()> {
        if c != self.arch.in_channels {
            return Err(Error::dim("C", format!("model expects {} channels, got {c}", self.arch.in_channels)));
        }
        for (axis, v) in [("T", t), ("H", h), ("W", w)] {
            if v == 0 || v % CHUNK != 0 {
                return Err(Error::dim(axis, format!("{axis} = {v} is not a positive multiple of {CHUNK}")));
            }
        }
        Ok(())
    }

    /// Posterior statistics of a `(T, C, H, W)` tensor, each `(T/8, H/8, W/8, C_z)`.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (t, c, h, w) = x.dims4()?;
        self.check_clip_dims(t, c, h, w)?;
        let n = t / CHUNK;
        // (T, C, H, W) -> (T/8 · 8, C, H, W): chunk index is the outer factor.
        let mut cur = x.reshape((n, CHUNK, c, h, w))?.reshape((n * CHUNK, c, h, w))?;
        let mut tt = CHUNK;
        for i in 0..3 {
            cur = self.conv(&cur, &format!("encoder.stage{i}.spatial"), 2, 1)?.silu()?;
            let (y, t_out) = self.tconv(&cur, n, tt, &format!("encoder.stage{i}.temporal"), 2)?;
            cur = y.silu()?;
            tt = t_out;
        }
        debug_assert_eq!(tt, 1);
        let head = self.conv(&cur, "posterior_head", 1, 0)?.permute((0, 2, 3, 1))?.contiguous()?;
        let cz = self.arch.c_z;
        let mean = head.narrow(3, 0, cz)?.contiguous()?;
        let logvar = head.narrow(3, cz, cz)?.contiguous()?;
        Ok((mean, logvar))
    }

    pub fn encode(&self, clip: &VideoClip, mode: SamplingMode) -> Result<LatentSequence> {
        let x = clip.to_tensor(self.params.dtype())?;
        let (mean, logvar) = self.encode_tensor(&x)?;
        let units = match mode {
            SamplingMode::Deterministic => mean.clone(),
            SamplingMode::Sample(seed) => reparameterize(&mean, &logvar, &mut seeded_rng(seed))?,
        };
        Ok(LatentSequence {
            units,
            post_mean: mean,
            post_logvar: logvar,
        })
    }

    /// Decodes one window of `R` contiguous units `(R, h, w, C_z)` into `8R` frames.
    pub fn decode_window(&self, z: &Tensor) -> Result<Tensor> {
        let (r, _, _, cz) = z.dims4()?;
        if cz != self.arch.c_z {
            return Err(Error::dim("C_z", format!("model expects {} latent channels, got {cz}", self.arch.c_z)));
        }
        let mut cur = z.permute((0, 3, 1, 2))?.contiguous()?;
        cur = self.conv(&cur, "decoder.conv_in", 1, 1)?.silu()?;
        let mut tt = r;
        for i in 0..3 {
            cur = temporal_upsample(&cur, 1, tt)?;
            tt *= 2;
            let (y, _) = self.tconv(&cur, 1, tt, &format!("decoder.stage{i}.temporal"), 1)?;
            cur = spatial_upsample(&y.silu()?)?;
            cur = if i < 2 {
                self.conv(&cur, &format!("decoder.stage{i}.spatial"), 1, 1)?.silu()?
            } else {
                self.conv(&cur, "decoder.conv_out", 1, 1)?
            };
        }
        Ok(cur)
    }

    /// Splits `(U, h, w, C_z)` into `U / R` windows and decodes each independently.
    pub fn decode_windows(&self, z: &Tensor, window: usize) -> Result<Vec<Tensor>> {
        if !DECODE_WINDOWS.contains(&window) {
            return Err(Error::dim("R", format!("decoder window must be one of {DECODE_WINDOWS:?}, got {window}")));
        }
        let u = z.dims()[0];
        if u % window != 0 {
            return Err(Error::dim("U", format!("{u} latent units are not divisible by window {window}")));
        }
        (0..u / window)
            .map(|g| self.decode_window(&z.narrow(0, g * window, window)?))
            .collect()
    }

    /// Reconstruction `(8U, C, H, W)` of latent units.
    pub fn decode_tensor(&self, z: &Tensor, window: usize) -> Result<Tensor> {
        let parts = self.decode_windows(z, window)?;
        Ok(Tensor::cat(&parts, 0)?)
    }

    pub fn decode(&self, latents: &LatentSequence, window: usize, fps: f64) -> Result<VideoClip> {
        let x = self.decode_tensor(&latents.units, window)?;
        VideoClip::from_tensor(&x, fps)
    }

    /// Patch scores of the strided critic for frames `(T, C, H, W)`.
    pub fn critic(&self, x: &Tensor) -> Result<Tensor> {
        let h = leaky(&self.conv(x, "discriminator.conv0", 2, 1)?)?;
        let h = leaky(&self.conv(&h, "discriminator.conv1", 2, 1)?)?;
        self.conv(&h, "discriminator.conv2", 1, 1)
    }

    pub fn autoencoder_vars(&self) -> Vec<candle_core::Var> {
        let mut vars = self.params.vars_with_prefix("encoder.");
        vars.extend(self.params.vars_with_prefix("posterior_head."));
        vars.extend(self.params.vars_with_prefix("decoder."));
        vars
    }

    pub fn critic_vars(&self) -> Vec<candle_core::Var> {
        self.params.vars_with_prefix("discriminator.")
    }
}

/// `mean + exp(logvar / 2) · ε` with `ε` drawn from `rng`.
pub fn reparameterize(mean: &Tensor, logvar: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let eps = randn(rng, mean.dims(), mean.dtype(), mean.device())?;
    Ok((mean + logvar.affine(0.5, 0.0)?.exp()?.mul(&eps)?)?)
}
