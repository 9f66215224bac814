//! Hashing tokenizer and a frozen lookup-table text encoder.

use candle_core::{DType, Device, Tensor, D};
use rand_chacha::ChaCha8Rng;

use crate::dit::model::Conditioning;
use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const DEFAULT_VOCAB: usize = 4096;
pub const DEFAULT_MAX_LEN: usize = 64;

/// Lower-cases, splits on anything non-alphanumeric and hashes each word
/// (FNV-1a, 64 bit) into `vocab` buckets.
pub fn tokenize(prompt: &str, vocab: usize) -> Vec<u32> {
    prompt
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| {
            let mut h: u64 = 0xcbf2_9ce4_8422_2325;
            for b in w.to_lowercase().bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
            (h % vocab as u64) as u32
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TextEmbedding {
    /// `(L, text_dim)`, RMS-normalized rows.
    pub embeddings: Tensor,
    /// Set when the id sequence exceeded `max_len` and was cut.
    pub truncated: bool,
}

/// Batched text features with a key mask (1 = real token, 0 = padding).
#[derive(Debug, Clone)]
pub struct TextBatch {
    pub embeddings: Tensor,
    pub mask: Tensor,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub vocab: usize,
    pub max_len: usize,
    pub text_dim: usize,
    /// `text.table` `(vocab, text_dim)` and `text.null` `(1, text_dim)`.
    pub params: ParamStore,
}

fn rms_normalize(x: &Tensor) -> Result<Tensor> {
    let ms = x.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(x.broadcast_div(&(ms + 1e-6)?.sqrt()?)?)
}

impl TextEncoder {
    pub fn new(vocab: usize, max_len: usize, text_dim: usize, dtype: DType, rng: &mut ChaCha8Rng) -> Result<Self> {
        if vocab == 0 || max_len == 0 || text_dim == 0 {
            return Err(Error::Config("text encoder sizes must be positive".into()));
        }
        let mut params = ParamStore::new(dtype);
        params.normal(rng, "text.table", &[vocab, text_dim], 1.0)?;
        params.normal(rng, "text.null", &[1, text_dim], 1.0)?;
        Ok(Self {
            vocab,
            max_len,
            text_dim,
            params,
        })
    }

    pub fn tokenize(&self, prompt: &str) -> Vec<u32> {
        tokenize(prompt, self.vocab)
    }

    pub fn embed(&self, ids: &[u32]) -> Result<TextEmbedding> {
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.vocab) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", self.vocab)));
        }
        let truncated = ids.len() > self.max_len;
        let ids = &ids[..ids.len().min(self.max_len)];
        let raw = if ids.is_empty() {
            self.params.get("text.null")?
        } else {
            let idx = Tensor::from_vec(ids.to_vec(), ids.len(), &Device::Cpu)?;
            self.params.get("text.table")?.index_select(&idx, 0)?
        };
        Ok(TextEmbedding {
            embeddings: rms_normalize(&raw)?,
            truncated,
        })
    }

    pub fn embed_prompt(&self, prompt: &str) -> Result<TextEmbedding> {
        self.embed(&self.tokenize(prompt))
    }

    /// Pads a batch of id sequences to a common length.
    pub fn embed_batch(&self, batch: &[Vec<u32>]) -> Result<TextBatch> {
        if batch.is_empty() {
            return Err(Error::Input("empty text batch".into()));
        }
        let embs = batch.iter().map(|ids| self.embed(ids)).collect::<Result<Vec<_>>>()?;
        let len = embs.iter().map(|e| e.embeddings.dims()[0]).max().unwrap_or(1);
        let dtype = self.params.dtype();
        let mut rows = Vec::with_capacity(embs.len());
        let mut mask = Vec::with_capacity(embs.len() * len);
        for e in &embs {
            let l = e.embeddings.dims()[0];
            let padded = if l < len {
                let pad = Tensor::zeros((len - l, self.text_dim), dtype, &Device::Cpu)?;
                Tensor::cat(&[&e.embeddings, &pad], 0)?
            } else {
                e.embeddings.clone()
            };
            rows.push(padded);
            mask.extend((0..len).map(|i| if i < l { 1.0 } else { 0.0 }));
        }
        Ok(TextBatch {
            embeddings: Tensor::stack(&rows, 0)?,
            mask: Tensor::from_vec(mask, (embs.len(), len), &Device::Cpu)?.to_dtype(dtype)?,
        })
    }

    /// Conditioning for a batch of prompts sharing one frame rate.
    pub fn condition(&self, prompts: &[&str], fps: f64) -> Result<Conditioning> {
        let ids: Vec<Vec<u32>> = prompts.iter().map(|p| self.tokenize(p)).collect();
        let batch = self.embed_batch(&ids)?;
        Ok(Conditioning {
            text: batch.embeddings,
            text_mask: Some(batch.mask),
            fps: vec![fps; prompts.len()],
        })
    }
}
