//! Video VAE with chunk-local (minimal) encoding and windowed decoding.

pub mod clip;
pub mod loss;
pub mod model;
pub mod train;

pub use clip::{moving_blob_clip, ClipHeader, VideoClip};
pub use loss::{
    critic_hinge_loss, kl_divergence, perceptual_proxy, reconstruction_loss, saliency_weights, vae_total_loss,
    RecComponents, RecWeights, VaeConfig, VaeLoss, VaeLossComponents,
};
pub use model::{reparameterize, LatentSequence, SamplingMode, VaeArch, VideoVae, CHUNK, DECODE_WINDOWS};
pub use train::{VaeStepMetrics, VaeTrainer};
