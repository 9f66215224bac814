//! Composite VAE objective: weighted reconstruction, KL and hinge-GAN terms.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weights of the three reconstruction components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecWeights {
    pub mse: f64,
    pub l1: f64,
    pub perc: f64,
}

impl Default for RecWeights {
    fn default() -> Self {
        Self {
            mse: 1.0,
            l1: 1.0,
            perc: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeConfig {
    pub c_z: usize,
    pub lambda_kl: f64,
    pub gamma_gan: f64,
    pub rec_weights: RecWeights,
    pub adaptive_floor: f64,
    /// Replace the plain L1 term with the saliency-weighted one.
    pub adaptive_weighting: bool,
    pub gan_enabled: bool,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            c_z: 24,
            lambda_kl: 1e-6,
            gamma_gan: 0.01,
            rec_weights: RecWeights::default(),
            adaptive_floor: 0.1,
            adaptive_weighting: true,
            gan_enabled: false,
        }
    }
}

impl VaeConfig {
    pub fn validate(&self) -> Result<()> {
        let w = self.rec_weights;
        if [w.mse, w.l1, w.perc, self.lambda_kl, self.gamma_gan].iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if w.mse == 0.0 && w.l1 == 0.0 && w.perc == 0.0 {
            return Err(Error::Config("reconstruction weights are all zero".into()));
        }
        if self.c_z == 0 {
            return Err(Error::Config("c_z must be positive".into()));
        }
        if !(self.adaptive_floor > 0.0) {
            return Err(Error::Config("adaptive_floor must be positive".into()));
        }
        Ok(())
    }
}

/// Replicate-padded 5-point Laplacian of a row-major plane.
pub(crate) fn laplacian_replicate(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        img[yy * w + xx]
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            out[y as usize * w + x as usize] =
                at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - 4.0 * at(y, x);
        }
    }
    out
}

/// Spatiotemporal saliency `|Δ_t ∇² x_t|` of a `(T, C, H, W)` clip.
///
/// Channels are averaged before the Laplacian. The last frame has no forward
/// difference and reuses the map of frame `T - 2`. Returns `(T, 1, H, W)`.
pub fn saliency_weights(clip: &Tensor) -> Result<Tensor> {
    let (t, _, h, w) = clip.dims4()?;
    if t < 2 {
        return Err(Error::dim("T", "saliency needs at least two frames"));
    }
    let gray = clip.to_dtype(DType::F64)?.mean(1)?.flatten_all()?.to_vec1::<f64>()?;
    let plane = h * w;
    let laps: Vec<Vec<f64>> = (0..t)
        .map(|i| laplacian_replicate(&gray[i * plane..(i + 1) * plane], h, w))
        .collect();
    let mut out = Vec::with_capacity(t * plane);
    for i in 0..t - 1 {
        out.extend(laps[i + 1].iter().zip(&laps[i]).map(|(a, b)| (a - b).abs()));
    }
    let last = out[(t - 2) * plane..].to_vec();
    out.extend(last);
    Ok(Tensor::from_vec(out, (t, 1, h, w), clip.device())?.to_dtype(clip.dtype())?)
}

fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t.to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
    if !s.is_finite() {
        return Err(Error::Numeric(format!("{what} contains NaN or Inf")));
    }
    Ok(())
}

/// Mean KL divergence of a diagonal Gaussian posterior from the standard normal.
pub fn kl_divergence(post_mean: &Tensor, post_logvar: &Tensor) -> Result<Tensor> {
    if post_mean.dims() != post_logvar.dims() {
        return Err(Error::dim(
            "posterior",
            format!("mean {:?} vs logvar {:?}", post_mean.dims(), post_logvar.dims()),
        ));
    }
    ensure_finite(post_mean, "posterior mean")?;
    ensure_finite(post_logvar, "posterior log-variance")?;
    // -1/2 (1 + logvar - mean^2 - exp(logvar))
    let inner = ((post_logvar.affine(1.0, 1.0)? - post_mean.sqr()?)? - post_logvar.exp()?)?;
    Ok(inner.mean_all()?.affine(-0.5, 0.0)?)
}

fn grad_magnitude(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let gx = (x.narrow(3, 1, w - 1)? - x.narrow(3, 0, w - 1)?)?.narrow(2, 0, h - 1)?;
    let gy = (x.narrow(2, 1, h - 1)? - x.narrow(2, 0, h - 1)?)?.narrow(3, 0, w - 1)?;
    Ok((gx.sqr()? + gy.sqr()?)?.affine(1.0, 1e-6)?.sqrt()?)
}

/// Fixed-filter perceptual proxy: mean L1 distance between gradient-magnitude
/// maps at up to three 2× average-pooled scales.
pub fn perceptual_proxy(clip: &Tensor, recon: &Tensor) -> Result<Tensor> {
    let mut a = clip.clone();
    let mut b = recon.clone();
    let mut terms = Vec::new();
    for scale in 0..3 {
        let (_, _, h, w) = a.dims4()?;
        if h < 2 || w < 2 {
            break;
        }
        terms.push((grad_magnitude(&a)? - grad_magnitude(&b)?)?.abs()?.mean_all()?);
        if scale < 2 {
            if h < 4 || w < 4 {
                break;
            }
            a = a.avg_pool2d(2)?;
            b = b.avg_pool2d(2)?;
        }
    }
    let n = terms.len() as f64;
    Ok(Tensor::stack(&terms, 0)?.sum_all()?.affine(1.0 / n, 0.0)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct RecComponents {
    pub mse: f64,
    /// Saliency-weighted L1, or plain L1 without saliency.
    pub l1: f64,
    pub perc: f64,
    pub total: f64,
}

/// Weighted reconstruction loss. With `saliency` present the L1 term becomes
/// `mean((ŵ + floor) · |x − x̂|)` where `ŵ` is the saliency scaled to unit
/// mean; an all-zero saliency map counts as uniform.
pub fn reconstruction_loss(
    clip: &Tensor,
    recon: &Tensor,
    weights: RecWeights,
    saliency: Option<&Tensor>,
    floor: f64,
) -> Result<(Tensor, RecComponents)> {
    if clip.dims() != recon.dims() {
        return Err(Error::dim(
            "shape",
            format!("clip {:?} vs recon {:?}", clip.dims(), recon.dims()),
        ));
    }
    let diff = (recon - clip)?;
    let mse = diff.sqr()?.mean_all()?;
    let abs = diff.abs()?;
    let l1 = match saliency {
        None => abs.mean_all()?,
        Some(s) => {
            let (t, _, h, w) = clip.dims4()?;
            if s.dims() != [t, 1, h, w] {
                return Err(Error::dim("saliency", format!("expected ({t}, 1, {h}, {w}), got {:?}", s.dims())));
            }
            let mean = s.to_dtype(DType::F64)?.mean_all()?.to_scalar::<f64>()?;
            let normalized = if mean > 0.0 {
                s.affine(1.0 / mean, floor)?
            } else {
                s.ones_like()?.affine(1.0, floor)?
            };
            abs.broadcast_mul(&normalized.detach())?.mean_all()?
        }
    };
    let perc = perceptual_proxy(clip, recon)?;
    let total = ((mse.affine(weights.mse, 0.0)? + l1.affine(weights.l1, 0.0)?)? + perc.affine(weights.perc, 0.0)?)?;
    let comps = RecComponents {
        mse: scalar(&mse)?,
        l1: scalar(&l1)?,
        perc: scalar(&perc)?,
        total: scalar(&total)?,
    };
    Ok((total, comps))
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct VaeLossComponents {
    pub rec: RecComponents,
    pub kl: f64,
    pub gan: f64,
    pub total: f64,
}

pub struct VaeLoss {
    pub total: Tensor,
    pub components: VaeLossComponents,
}

/// `L_rec + λ·L_KL + γ·L_GAN`. The generator adversarial term is the hinge
/// form `−mean(critic_scores)` and only contributes when `gan_enabled`.
pub fn vae_total_loss(
    clip: &Tensor,
    recon: &Tensor,
    post_mean: &Tensor,
    post_logvar: &Tensor,
    critic_scores: Option<&Tensor>,
    config: &VaeConfig,
) -> Result<VaeLoss> {
    let saliency = if config.adaptive_weighting && clip.dim(0)? >= 2 {
        Some(saliency_weights(clip)?)
    } else {
        None
    };
    let (rec, rec_c) = reconstruction_loss(clip, recon, config.rec_weights, saliency.as_ref(), config.adaptive_floor)?;
    let kl = kl_divergence(post_mean, post_logvar)?;
    let gan = if config.gan_enabled {
        let scores = critic_scores
            .ok_or_else(|| Error::Config("gan_enabled requires critic scores".into()))?;
        scores.mean_all()?.neg()?
    } else {
        rec.zeros_like()?
    };
    let total = ((rec + kl.affine(config.lambda_kl, 0.0)?)? + gan.affine(config.gamma_gan, 0.0)?)?;
    let components = VaeLossComponents {
        rec: rec_c,
        kl: scalar(&kl)?,
        gan: scalar(&gan)?,
        total: scalar(&total)?,
    };
    Ok(VaeLoss { total, components })
}

/// Hinge loss for the critic: `mean(relu(1 − D(real))) + mean(relu(1 + D(fake)))`.
pub fn critic_hinge_loss(real_scores: &Tensor, fake_scores: &Tensor) -> Result<Tensor> {
    let real = real_scores.affine(-1.0, 1.0)?.relu()?.mean_all()?;
    let fake = fake_scores.affine(1.0, 1.0)?.relu()?.mean_all()?;
    Ok((real + fake)?)
}
