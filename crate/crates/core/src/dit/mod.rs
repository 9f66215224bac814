//! Diffusion transformer: text encoder stub, rotary embedding, patching and blocks.

pub mod config;
pub mod model;
pub mod patch;
pub mod rope;
pub mod text;

pub use config::{rope_split_for, DiTConfig, PATCH};
pub use model::{qk_logits, rms_norm, sinusoid, tensor_roles, tensor_shape, Conditioning, DiT, GlobalModulation, TensorRole};
pub use patch::{grid_coords, patchify, token_dims, unpatchify, TokenGrid};
pub use rope::Rope3d;
pub use text::{tokenize, TextBatch, TextEmbedding, TextEncoder, DEFAULT_MAX_LEN, DEFAULT_VOCAB};
