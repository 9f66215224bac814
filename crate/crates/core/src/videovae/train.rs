use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::seeded_rng;
use crate::videovae::loss::{critic_hinge_loss, scalar, vae_total_loss, VaeConfig, VaeLossComponents};
use crate::videovae::model::{reparameterize, VideoVae, DECODE_WINDOWS};

#[derive(Debug, Clone, Serialize)]
pub struct VaeStepMetrics {
    pub step: usize,
    pub window: usize,
    pub loss: VaeLossComponents,
    pub critic_loss: Option<f64>,
}

/// Single-clip-batch trainer for [`VideoVae`].
///
/// The decoder window cycles through every entry of `{1, 4, 8}` that divides
/// the unit count. The critic is only trained while `gan_enabled` is set,
/// which is meant for a final fine-tuning phase.
pub struct VaeTrainer {
    pub vae: VideoVae,
    pub config: VaeConfig,
    ae_opt: AdamW,
    critic_opt: AdamW,
    rng: ChaCha8Rng,
    step: usize,
}

impl VaeTrainer {
    pub fn new(vae: VideoVae, config: VaeConfig, lr: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.c_z != vae.arch.c_z {
            return Err(Error::Config(format!(
                "loss config c_z {} differs from model c_z {}",
                config.c_z, vae.arch.c_z
            )));
        }
        let params = ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        };
        let ae_opt = AdamW::new(vae.autoencoder_vars(), params.clone())?;
        let critic_opt = AdamW::new(vae.critic_vars(), params)?;
        Ok(Self {
            vae,
            config,
            ae_opt,
            critic_opt,
            rng: seeded_rng(seed),
            step: 0,
        })
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.ae_opt.set_learning_rate(lr);
        self.critic_opt.set_learning_rate(lr);
    }

    pub fn set_gan_enabled(&mut self, enabled: bool) {
        self.config.gan_enabled = enabled;
    }

    fn window_for(&self, units: usize) -> usize {
        let options: Vec<usize> = DECODE_WINDOWS.iter().copied().filter(|r| units % r == 0).collect();
        options[self.step % options.len()]
    }

    /// One optimizer step on a `(T, C, H, W)` clip tensor.
    pub fn train_step(&mut self, clip: &Tensor) -> Result<VaeStepMetrics> {
        let (mean, logvar) = self.vae.encode_tensor(clip)?;
        let z = reparameterize(&mean, &logvar, &mut self.rng)?;
        let window = self.window_for(z.dims()[0]);
        let recon = self.vae.decode_tensor(&z, window)?;
        let scores = if self.config.gan_enabled {
            Some(self.vae.critic(&recon)?)
        } else {
            None
        };
        let loss = vae_total_loss(clip, &recon, &mean, &logvar, scores.as_ref(), &self.config)?;
        if !loss.components.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite VAE loss at step {}", self.step)));
        }
        self.ae_opt.backward_step(&loss.total)?;

        let critic_loss = if self.config.gan_enabled {
            let real = self.vae.critic(clip)?;
            let fake = self.vae.critic(&recon.detach())?;
            let l = critic_hinge_loss(&real, &fake)?;
            self.critic_opt.backward_step(&l)?;
            Some(scalar(&l)?)
        } else {
            None
        };
        let metrics = VaeStepMetrics {
            step: self.step,
            window,
            loss: loss.components,
            critic_loss,
        };
        self.step += 1;
        Ok(metrics)
    }

    /// Deterministic reconstruction (posterior mean, window 1).
    pub fn reconstruct(&self, clip: &Tensor) -> Result<Tensor> {
        let (mean, _) = self.vae.encode_tensor(clip)?;
        self.vae.decode_tensor(&mean, 1)
    }
}
