//! Straight-path interpolation, masked regression loss and frame conditioning.
//!
//! Data sits at `t = 0`, noise at `t = 1`, and the regression target is the
//! constant velocity `noise − data`.

use candle_core::{DType, Device, Tensor};

use crate::dit::patch::token_dims;
use crate::error::{Error, Result};

fn per_sample(t: &Tensor, rank: usize) -> Result<Tensor> {
    let b = t.dims1()?;
    let mut shape = vec![1usize; rank];
    shape[0] = b;
    Ok(t.reshape(shape)?)
}

/// Returns `(x_t, v_target)` for per-sample times `t` of shape `(B,)`.
pub fn interpolate(x_data: &Tensor, noise: &Tensor, t: &Tensor) -> Result<(Tensor, Tensor)> {
    if x_data.dims() != noise.dims() {
        return Err(Error::dim("shape", format!("data {:?} vs noise {:?}", x_data.dims(), noise.dims())));
    }
    let b = t.dims1()?;
    if x_data.dims().first() != Some(&b) {
        return Err(Error::dim("batch", format!("{b} times for data {:?}", x_data.dims())));
    }
    let tv = t.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if let Some(bad) = tv.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Input(format!("interpolation time {bad} outside [0, 1]")));
    }
    let tt = per_sample(&t.to_dtype(x_data.dtype())?, x_data.rank())?;
    let one_minus = tt.affine(-1.0, 1.0)?;
    let x_t = (x_data.broadcast_mul(&one_minus)? + noise.broadcast_mul(&tt)?)?;
    let v = (noise - x_data)?;
    Ok((x_t, v))
}

/// Mean squared error over the elements where `loss_mask` is 1.
///
/// `loss_mask` must broadcast to the prediction shape. An all-zero mask gives
/// a loss of exactly 0 with zero gradients.
pub fn flow_loss(pred: &Tensor, target: &Tensor, loss_mask: Option<&Tensor>) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::dim("shape", format!("prediction {:?} vs target {:?}", pred.dims(), target.dims())));
    }
    let sq = (pred - target)?.sqr()?;
    match loss_mask {
        None => Ok(sq.mean_all()?),
        Some(m) => {
            let m = m.to_dtype(pred.dtype())?.broadcast_as(pred.dims())?;
            let count = m.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            let total = (sq * m)?.sum_all()?;
            Ok((total / count.max(1.0))?)
        }
    }
}

/// Tokens whose content is given rather than generated.
#[derive(Debug, Clone)]
pub struct ConditionMask {
    batch: usize,
    dims: [usize; 3],
    /// Row-major `(B, N)` flags.
    conditioned: Vec<bool>,
    /// Clean latents `(B, U, h, w, C)`; only read at conditioned positions.
    pub condition_latents: Option<Tensor>,
}

impl ConditionMask {
    /// Nothing conditioned: pure text-to-video.
    pub fn none(batch: usize, dims: [usize; 3]) -> Self {
        Self {
            batch,
            dims,
            conditioned: vec![false; batch * dims.iter().product::<usize>()],
            condition_latents: None,
        }
    }

    /// Builds a mask from per-token flags, checking that flags are constant within each latent unit.
    pub fn from_flags(
        batch: usize,
        dims: [usize; 3],
        conditioned: Vec<bool>,
        condition_latents: Option<Tensor>,
    ) -> Result<Self> {
        let per_unit = dims[1] * dims[2];
        if conditioned.len() != batch * dims[0] * per_unit {
            return Err(Error::dim("tokens", format!("{} flags for {batch}×{dims:?}", conditioned.len())));
        }
        for (i, unit) in conditioned.chunks(per_unit).enumerate() {
            if unit.iter().any(|&f| f != unit[0]) {
                return Err(Error::Input(format!(
                    "conditioning must cover whole latent units (sample {}, unit {})",
                    i / dims[0],
                    i % dims[0]
                )));
            }
        }
        if conditioned.iter().any(|&f| f) {
            let lat = condition_latents
                .as_ref()
                .ok_or_else(|| Error::Input("conditioned tokens given without condition latents".into()))?;
            let d = lat.dims();
            let want = [batch, dims[0], dims[1] * 2, dims[2] * 2];
            if d.len() != 5 || d[..4] != want {
                return Err(Error::dim("condition_latents", format!("shape {d:?} does not match grid {want:?}")));
            }
        }
        Ok(Self {
            batch,
            dims,
            conditioned,
            condition_latents,
        })
    }

    /// Conditions the first `units` latent units of every sample whose flag is set.
    pub fn first_units(flags: &[bool], units: usize, latents: &Tensor) -> Result<Self> {
        let (b, u, h, w, _) = latents.dims5()?;
        if flags.len() != b {
            return Err(Error::dim("batch", format!("{} flags for batch {b}", flags.len())));
        }
        if units > u {
            return Err(Error::Input(format!("cannot condition {units} of {u} units")));
        }
        let dims = token_dims(u, h, w)?;
        let per_unit = dims[1] * dims[2];
        let mut conditioned = Vec::with_capacity(b * u * per_unit);
        for &f in flags {
            for unit in 0..u {
                conditioned.extend(std::iter::repeat_n(f && unit < units, per_unit));
            }
        }
        Self::from_flags(b, dims, conditioned, Some(latents.clone()))
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn conditioned(&self) -> &[bool] {
        &self.conditioned
    }

    pub fn is_empty(&self) -> bool {
        !self.conditioned.iter().any(|&f| f)
    }

    /// `(B, N)` tensor, 1 at conditioned tokens.
    pub fn token_mask(&self, dtype: DType) -> Result<Tensor> {
        let n: usize = self.dims.iter().product();
        let v: Vec<f64> = self.conditioned.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect();
        Ok(Tensor::from_vec(v, (self.batch, n), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// `(B, U, h, w, 1)` tensor, 1 at latent sites covered by conditioned tokens.
    pub fn latent_mask(&self, dtype: DType) -> Result<Tensor> {
        let [u, th, tw] = self.dims;
        let (h, w) = (th * 2, tw * 2);
        let mut v = Vec::with_capacity(self.batch * u * h * w);
        for b in 0..self.batch {
            for t in 0..u {
                for y in 0..h {
                    for x in 0..w {
                        let tok = ((b * u + t) * th + y / 2) * tw + x / 2;
                        v.push(if self.conditioned[tok] { 1.0 } else { 0.0 });
                    }
                }
            }
        }
        Ok(Tensor::from_vec(v, (self.batch, u, h, w, 1), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Overwrites conditioned sites of `x` with the condition latents.
    pub fn impose(&self, x: &Tensor) -> Result<Tensor> {
        if self.is_empty() {
            return Ok(x.clone());
        }
        let cond = self
            .condition_latents
            .as_ref()
            .ok_or_else(|| Error::Input("conditioned tokens given without condition latents".into()))?;
        let m = self.latent_mask(DType::U8)?.broadcast_as(x.dims())?;
        Ok(m.where_cond(&cond.to_dtype(x.dtype())?, x)?)
    }
}

/// Model inputs for one conditioned step.
#[derive(Debug, Clone)]
pub struct ConditionedInput {
    pub latents: Tensor,
    /// `(B, N)`, zero at conditioned tokens.
    pub timesteps: Tensor,
    /// `(B, U, h, w, 1)`, 1 where the loss applies.
    pub loss_mask: Tensor,
}

pub fn apply_condition_mask(x_t: &Tensor, timesteps: &Tensor, mask: &ConditionMask) -> Result<ConditionedInput> {
    let (b, u, h, w, _) = x_t.dims5()?;
    let dims = token_dims(u, h, w)?;
    if b != mask.batch || dims != mask.dims {
        return Err(Error::dim("mask", format!("mask grid {}×{:?} vs latents {b}×{dims:?}", mask.batch, mask.dims)));
    }
    if timesteps.dims() != [b, dims.iter().product::<usize>()] {
        return Err(Error::dim("timesteps", format!("timesteps {:?} for grid {b}×{dims:?}", timesteps.dims())));
    }
    let latents = mask.impose(x_t)?;
    let tok = mask.token_mask(DType::U8)?;
    let timesteps = tok.where_cond(&timesteps.zeros_like()?, timesteps)?;
    let loss_mask = mask.latent_mask(x_t.dtype())?.affine(-1.0, 1.0)?;
    Ok(ConditionedInput {
        latents,
        timesteps,
        loss_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{randn, seeded_rng};
    use candle_core::Var;
    use rand::Rng;

    fn flat(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn interpolation_endpoints() {
        let mut rng = seeded_rng(0);
        let x = randn(&mut rng, &[3, 1, 2, 2, 4], DType::F32, &Device::Cpu).unwrap();
        let n = randn(&mut rng, &[3, 1, 2, 2, 4], DType::F32, &Device::Cpu).unwrap();
        let t = Tensor::new(&[0f32, 1.0, 0.5], &Device::Cpu).unwrap();
        let (xt, v) = interpolate(&x, &n, &t).unwrap();
        let (xs, ns, xts) = (flat(&x), flat(&n), flat(&xt));
        let per = 16;
        assert_eq!(xts[..per], xs[..per]);
        assert_eq!(xts[per..2 * per], ns[per..2 * per]);
        for i in 2 * per..3 * per {
            assert!((xts[i] - 0.5 * (xs[i] + ns[i])).abs() < 1e-6);
        }
        let vs = flat(&v);
        for i in 0..vs.len() {
            assert_eq!(vs[i] as f32, ns[i] as f32 - xs[i] as f32);
        }
    }

    #[test]
    fn interpolation_rejects_mismatch() {
        let x = Tensor::zeros((1, 4), DType::F32, &Device::Cpu).unwrap();
        let n = Tensor::zeros((1, 5), DType::F32, &Device::Cpu).unwrap();
        let t = Tensor::new(&[0.5f32], &Device::Cpu).unwrap();
        assert!(matches!(interpolate(&x, &n, &t), Err(Error::Dimension { .. })));
    }

    #[test]
    fn hand_loss() {
        let p = Tensor::new(&[1f64, 2.0, 3.0], &Device::Cpu).unwrap();
        let t = Tensor::new(&[0f64, 2.0, 5.0], &Device::Cpu).unwrap();
        let l = flow_loss(&p, &t, None).unwrap().to_scalar::<f64>().unwrap();
        assert!((l - 5.0 / 3.0).abs() < 1e-15);
        assert_eq!(flow_loss(&p, &p, None).unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn fully_masked_loss_is_zero_with_zero_grad() {
        let p = Var::new(&[1f64, 2.0, 3.0], &Device::Cpu).unwrap();
        let t = Tensor::new(&[0f64, 2.0, 5.0], &Device::Cpu).unwrap();
        let m = Tensor::zeros(3, DType::F64, &Device::Cpu).unwrap();
        let l = flow_loss(p.as_tensor(), &t, Some(&m)).unwrap();
        assert_eq!(l.to_scalar::<f64>().unwrap(), 0.0);
        let g = l.backward().unwrap();
        assert_eq!(flat(g.get(p.as_tensor()).unwrap()), vec![0.0; 3]);
    }

    #[test]
    fn empty_mask_changes_nothing() {
        let mut rng = seeded_rng(1);
        let x = randn(&mut rng, &[2, 2, 4, 4, 3], DType::F32, &Device::Cpu).unwrap();
        let ts = Tensor::full(0.7f32, (2, 8), &Device::Cpu).unwrap();
        let out = apply_condition_mask(&x, &ts, &ConditionMask::none(2, [2, 2, 2])).unwrap();
        assert_eq!(flat(&out.latents), flat(&x));
        assert_eq!(flat(&out.timesteps), flat(&ts));
        assert!(flat(&out.loss_mask).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn first_frame_conditioning() {
        let mut rng = seeded_rng(2);
        let clean = randn(&mut rng, &[2, 3, 4, 4, 3], DType::F32, &Device::Cpu).unwrap();
        let noisy = randn(&mut rng, &[2, 3, 4, 4, 3], DType::F32, &Device::Cpu).unwrap();
        let ts = Tensor::full(0.4f32, (2, 12), &Device::Cpu).unwrap();
        let mask = ConditionMask::first_units(&[true, false], 1, &clean).unwrap();
        let out = apply_condition_mask(&noisy, &ts, &mask).unwrap();
        let t = out.timesteps.to_vec2::<f32>().unwrap();
        assert!(t[0][..4].iter().all(|&v| v == 0.0));
        assert!(t[0][4..].iter().all(|&v| v == 0.4));
        assert!(t[1].iter().all(|&v| v == 0.4));
        let got = flat(&out.latents.get(0).unwrap().get(0).unwrap());
        assert_eq!(got, flat(&clean.get(0).unwrap().get(0).unwrap()));
        assert_eq!(flat(&out.latents.get(1).unwrap()), flat(&noisy.get(1).unwrap()));
    }

    #[test]
    fn loss_mask_is_complement() {
        let mut rng = seeded_rng(3);
        let lat = randn(&mut rng, &[3, 4, 2, 4, 2], DType::F32, &Device::Cpu).unwrap();
        for _ in 0..20 {
            let dims = [4, 1, 2];
            let mut flags = Vec::new();
            for _ in 0..3 * 4 {
                let f = rng.random_bool(0.5);
                flags.extend([f, f]);
            }
            let mask = ConditionMask::from_flags(3, dims, flags, Some(lat.clone())).unwrap();
            let ts = Tensor::full(0.5f32, (3, 8), &Device::Cpu).unwrap();
            let out = apply_condition_mask(&lat, &ts, &mask).unwrap();
            let cond = flat(&mask.latent_mask(DType::F32).unwrap());
            for (c, l) in cond.iter().zip(flat(&out.loss_mask)) {
                assert_eq!(c + l, 1.0);
            }
        }
    }

    #[test]
    fn partial_unit_rejected() {
        let flags = vec![true, false, false, false];
        let lat = Tensor::zeros((1, 1, 4, 4, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(ConditionMask::from_flags(1, [1, 2, 2], flags, Some(lat)).is_err());
    }

    #[test]
    fn missing_latents_rejected() {
        assert!(matches!(
            ConditionMask::from_flags(1, [1, 1, 1], vec![true], None),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn conditioned_sites_get_zero_gradient() {
        let mut rng = seeded_rng(4);
        let clean = randn(&mut rng, &[1, 2, 2, 2, 2], DType::F64, &Device::Cpu).unwrap();
        let target = randn(&mut rng, &[1, 2, 2, 2, 2], DType::F64, &Device::Cpu).unwrap();
        let mask = ConditionMask::first_units(&[true], 1, &clean).unwrap();
        let pred = Var::from_tensor(&randn(&mut rng, &[1, 2, 2, 2, 2], DType::F64, &Device::Cpu).unwrap()).unwrap();
        let ts = Tensor::full(0.5f64, (1, 2), &Device::Cpu).unwrap();
        let input = apply_condition_mask(&clean, &ts, &mask).unwrap();
        let l = flow_loss(pred.as_tensor(), &target, Some(&input.loss_mask)).unwrap();
        let g = flat(l.backward().unwrap().get(pred.as_tensor()).unwrap());
        assert!(g[..8].iter().all(|&v| v == 0.0));
        assert!(g[8..].iter().all(|&v| v != 0.0));
    }
}
