//! Frozen text encoders that map prompt token embeddings to a C-dim feature.

use candle_core::{DType, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::block::{causal_mask, LayerNormParams, ResidualAttentionBlock};
use super::prompts::PromptSet;
use crate::config::TextConfig;
use crate::error::{Error, Result};
use crate::nn;

/// Unit-norm text features for the normal and abnormal prompt of one layer.
#[derive(Debug, Clone)]
pub struct TextFeaturePair {
    /// `(C,)`
    pub normal: Tensor,
    /// `(C,)`
    pub abnormal: Tensor,
    pub layer: usize,
}

impl TextFeaturePair {
    pub fn detach(&self) -> Self {
        Self {
            normal: self.normal.detach(),
            abnormal: self.abnormal.detach(),
            layer: self.layer,
        }
    }

    pub fn dim(&self) -> usize {
        self.normal.dims()[0]
    }
}

/// Embedding table, mean pooling and a fixed random projection.
#[derive(Debug, Clone)]
pub struct ToyTextEncoder {
    /// `(vocab, D_text)`
    pub table: Tensor,
    /// `(C, D_text)`
    pub projection: Tensor,
}

impl ToyTextEncoder {
    pub fn new(cfg: &TextConfig, out_dim: usize, dtype: DType) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let table = nn::randn(&[cfg.vocab_size, cfg.d_text], 1.0, dtype, &mut rng)?;
        let projection = nn::randn(&[out_dim, cfg.d_text], 1.0 / (cfg.d_text as f64).sqrt(), dtype, &mut rng)?;
        Ok(Self { table, projection })
    }

    fn encode(&self, learnable: &Tensor, suffix: &[u32]) -> Result<Tensor> {
        let tokens = if suffix.is_empty() {
            learnable.clone()
        } else {
            let ids = Tensor::new(suffix, learnable.device())?;
            Tensor::cat(&[learnable, &self.table.index_select(&ids, 0)?], 0)?
        };
        let pooled = tokens.mean_keepdim(0)?;
        Ok(nn::linear(&pooled, &self.projection, None)?.squeeze(0)?)
    }
}

/// CLIP-style causal transformer pooled at the end-of-text token.
#[derive(Debug, Clone)]
pub struct ClipTextEncoder {
    pub token_embedding: Tensor,
    pub position: Tensor,
    pub blocks: Vec<ResidualAttentionBlock>,
    pub ln_final: LayerNormParams,
    /// `(D_text, C)`
    pub projection: Tensor,
    pub start_token: u32,
    pub end_token: u32,
}

impl ClipTextEncoder {
    fn encode(&self, learnable: &Tensor, suffix: &[u32]) -> Result<Tensor> {
        let lookup = |ids: &[u32]| -> Result<Tensor> {
            Ok(self.token_embedding.index_select(&Tensor::new(ids, learnable.device())?, 0)?)
        };
        let mut parts = vec![lookup(&[self.start_token])?, learnable.clone()];
        if !suffix.is_empty() {
            parts.push(lookup(suffix)?);
        }
        parts.push(lookup(&[self.end_token])?);
        let seq = Tensor::cat(&parts, 0)?;
        let n = seq.dims()[0];
        let ctx = self.position.dims()[0];
        if n > ctx {
            return Err(Error::Config(format!("prompt of {n} tokens exceeds context {ctx}")));
        }
        let mut x = seq.add(&self.position.narrow(0, 0, n)?)?.unsqueeze(0)?;
        let mask = causal_mask(n, x.dtype())?;
        for block in &self.blocks {
            x = block.forward(&x, Some(&mask))?;
        }
        let x = nn::layer_norm(&x, &self.ln_final.gamma, &self.ln_final.beta, 1e-5)?;
        let eot = x.narrow(1, n - 1, 1)?.reshape((1, x.dims()[2]))?;
        Ok(eot.matmul(&self.projection)?.squeeze(0)?)
    }
}

#[derive(Debug, Clone)]
pub enum TextBackend {
    Toy(ToyTextEncoder),
    Clip(ClipTextEncoder),
}

impl TextBackend {
    pub fn token_dim(&self) -> usize {
        match self {
            TextBackend::Toy(t) => t.table.dims()[1],
            TextBackend::Clip(t) => t.token_embedding.dims()[1],
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            TextBackend::Toy(t) => t.projection.dims()[0],
            TextBackend::Clip(t) => t.projection.dims()[1],
        }
    }

    /// Raw (unnormalized) text feature of `[learnable tokens][suffix]`.
    pub fn encode(&self, learnable: &Tensor, suffix: &[u32]) -> Result<Tensor> {
        if learnable.rank() != 2 || learnable.dims()[1] != self.token_dim() {
            return Err(Error::Config(format!(
                "prompt tokens {:?} do not match text width {}",
                learnable.dims(),
                self.token_dim()
            )));
        }
        match self {
            TextBackend::Toy(t) => t.encode(learnable, suffix),
            TextBackend::Clip(t) => t.encode(learnable, suffix),
        }
    }
}

/// Encodes all three prompt pairs into unit-norm text features.
pub fn encode_prompts(prompts: &PromptSet, backend: &TextBackend) -> Result<[TextFeaturePair; 3]> {
    let mut out = Vec::with_capacity(3);
    for (i, pair) in prompts.pairs.iter().enumerate() {
        let normal = backend.encode(&pair.normal, &prompts.suffix_normal)?;
        let abnormal = backend.encode(&pair.abnormal, &prompts.suffix_abnormal)?;
        out.push(TextFeaturePair {
            normal: unit(&normal)?,
            abnormal: unit(&abnormal)?,
            layer: i + 1,
        });
    }
    Ok(out.try_into().expect("three pairs"))
}

fn unit(v: &Tensor) -> Result<Tensor> {
    let norm = nn::scalar_f64(&v.sqr()?.sum_all()?.sqrt()?)?;
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Degenerate("text feature has zero or non-finite norm".into()));
    }
    Ok(v.broadcast_div(&v.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?)?)
}
