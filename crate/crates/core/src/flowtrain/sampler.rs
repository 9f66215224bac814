use candle_core::{DType, Device, Tensor};

use crate::dit::model::{Conditioning, DiT};
use crate::dit::patch::token_dims;
use crate::error::{Error, Result};
use crate::flowtrain::objective::{apply_condition_mask, ConditionMask};
use crate::params::{randn, seeded_rng};

/// Anything that predicts a velocity field over latent grids.
pub trait VelocityModel {
    /// `x`: `(B, U, h, w, C)`; `timesteps`: `(B, N)`.
    fn velocity(&self, x: &Tensor, timesteps: &Tensor, cond: &Conditioning) -> Result<Tensor>;
}

impl VelocityModel for DiT {
    fn velocity(&self, x: &Tensor, timesteps: &Tensor, cond: &Conditioning) -> Result<Tensor> {
        self.forward(x, timesteps, cond)
    }
}

/// Euler integration from `t = 1` at standard normal noise drawn from `seed`.
pub fn sample<M: VelocityModel>(
    model: &M,
    shape: [usize; 5],
    cond: &Conditioning,
    mask: Option<&ConditionMask>,
    steps: usize,
    seed: u64,
    dtype: DType,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::Input("steps must be ≥ 1".into()));
    }
    let x = randn(&mut seeded_rng(seed), &shape, dtype, &Device::Cpu)?;
    sample_from(model, &x, cond, mask, steps)
}

/// Euler integration from a given `t = 1` state.
pub fn sample_from<M: VelocityModel>(
    model: &M,
    x_init: &Tensor,
    cond: &Conditioning,
    mask: Option<&ConditionMask>,
    steps: usize,
) -> Result<Tensor> {
    integrate(model, x_init, cond, mask, steps, Direction::ToData)
}

/// Runs the ODE backwards from data (`t = 0`) to noise (`t = 1`).
pub fn invert<M: VelocityModel>(
    model: &M,
    x_data: &Tensor,
    cond: &Conditioning,
    mask: Option<&ConditionMask>,
    steps: usize,
) -> Result<Tensor> {
    integrate(model, x_data, cond, mask, steps, Direction::ToNoise)
}

#[derive(Clone, Copy)]
enum Direction {
    ToData,
    ToNoise,
}

fn integrate<M: VelocityModel>(
    model: &M,
    x_init: &Tensor,
    cond: &Conditioning,
    mask: Option<&ConditionMask>,
    steps: usize,
    dir: Direction,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::Input("steps must be ≥ 1".into()));
    }
    let (b, u, h, w, _) = x_init.dims5()?;
    let dims = token_dims(u, h, w)?;
    let n: usize = dims.iter().product();
    let none = ConditionMask::none(b, dims);
    let mask = mask.unwrap_or(&none);
    let dt = 1.0 / steps as f64;
    let mut x = mask.impose(x_init)?;
    for k in 0..steps {
        let t = match dir {
            Direction::ToData => 1.0 - k as f64 * dt,
            Direction::ToNoise => k as f64 * dt,
        };
        let ts = Tensor::full(t, (b, n), &Device::Cpu)?.to_dtype(x.dtype())?;
        let input = apply_condition_mask(&x, &ts, mask)?;
        let v = model.velocity(&input.latents, &input.timesteps, cond)?;
        x = match dir {
            Direction::ToData => (x - (v * dt)?)?,
            Direction::ToNoise => (x + (v * dt)?)?,
        };
        x = mask.impose(&x)?;
    }
    Ok(x)
}
