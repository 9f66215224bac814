//! Desk-scale training stack for latent video generation.
//!
//! The crate covers a chunk-local video VAE, a flow-matching diffusion
//! transformer with masked frame conditioning, width expansion of trained
//! models, preference post-training, corpus curation filters, and the
//! planning algorithms used to lay out training across devices.

pub mod checkpoint;
pub mod cli;
pub mod datapipe;
pub mod dit;
pub mod error;
pub mod expansion;
pub mod flowtrain;
pub mod infra;
pub mod metrics;
pub mod params;
pub mod posttrain;
pub mod videovae;

pub use error::{Error, Result};
pub use params::{NamedTensor, ParamStore, ParameterSet, Precision, TensorData};
