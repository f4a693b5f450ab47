//! Adapter for pretrained CLIP towers stored as safetensors with the
//! Hugging Face `CLIPModel` tensor names.
//!
//! Head counts follow the CLIP convention of 64-dim heads. Tokenization is
//! out of scope: prompt suffixes and start/end ids come from the config.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Tensor};

use super::block::{BlockParams, BlockShape, LayerNormParams, ResidualAttentionBlock};
use super::text::ClipTextEncoder;
use super::vision::{VisionTransformer, CLIP_PIXEL_MEAN, CLIP_PIXEL_STD};
use crate::config::{BackendKind, EncoderConfig, TextConfig};
use crate::error::{Error, Result};
use crate::nn::{Activation, CPU};

const HEAD_DIM: usize = 64;

struct Weights {
    tensors: HashMap<String, Tensor>,
    dtype: DType,
}

impl Weights {
    fn get(&self, name: &str) -> Result<Tensor> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Backend(format!("pretrained weights lack {name}")))?;
        Ok(t.to_dtype(self.dtype)?)
    }

    fn ln(&self, prefix: &str) -> Result<LayerNormParams> {
        Ok(LayerNormParams {
            gamma: self.get(&format!("{prefix}.weight"))?,
            beta: self.get(&format!("{prefix}.bias"))?,
        })
    }

    fn count_layers(&self, prefix: &str) -> usize {
        (0..)
            .take_while(|i| self.tensors.contains_key(&format!("{prefix}.{i}.layer_norm1.weight")))
            .count()
    }

    fn block(&self, prefix: &str, causal_width: usize) -> Result<ResidualAttentionBlock> {
        let g = |n: &str| self.get(&format!("{prefix}.{n}"));
        let params = BlockParams {
            ln1: Some(self.ln(&format!("{prefix}.layer_norm1"))?),
            wq: g("self_attn.q_proj.weight")?,
            bq: g("self_attn.q_proj.bias")?,
            wk: g("self_attn.k_proj.weight")?,
            bk: g("self_attn.k_proj.bias")?,
            wv: g("self_attn.v_proj.weight")?,
            bv: g("self_attn.v_proj.bias")?,
            wo: g("self_attn.out_proj.weight")?,
            bo: g("self_attn.out_proj.bias")?,
            ln2: Some(self.ln(&format!("{prefix}.layer_norm2"))?),
            w1: g("mlp.fc1.weight")?,
            b1: g("mlp.fc1.bias")?,
            w2: g("mlp.fc2.weight")?,
            b2: g("mlp.fc2.bias")?,
        };
        let shape = BlockShape {
            dim: causal_width,
            heads: (causal_width / HEAD_DIM).max(1),
            mlp_hidden: params.w1.dims()[0],
            layer_norm: true,
            activation: Activation::QuickGelu,
        };
        ResidualAttentionBlock::new(params, shape)
    }
}

/// Loads both CLIP towers from one safetensors file.
pub fn load_clip(
    path: &Path,
    enc: &EncoderConfig,
    text: &TextConfig,
    dtype: DType,
) -> Result<(VisionTransformer, ClipTextEncoder)> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let tensors = candle_core::safetensors::load(path, &CPU)?;
    let w = Weights { tensors, dtype };

    let patch = w.get("vision_model.embeddings.patch_embedding.weight")?;
    let (width, _, p, _) = patch.dims4()?;
    let patch_weight = patch.reshape((width, 3 * p * p))?;
    let position = w.get("vision_model.embeddings.position_embedding.weight")?;
    let grid = ((position.dims()[0] - 1) as f64).sqrt().round() as usize;
    if grid * p != enc.resolution {
        return Err(Error::Config(format!(
            "pretrained encoder expects {}px input, config says {}",
            grid * p,
            enc.resolution
        )));
    }
    let depth = w.count_layers("vision_model.encoder.layers");
    let blocks = (0..depth)
        .map(|i| w.block(&format!("vision_model.encoder.layers.{i}"), width))
        .collect::<Result<Vec<_>>>()?;
    let taps = enc.tap_layers.unwrap_or_else(|| crate::config::default_taps(depth));
    if taps[2] > depth {
        return Err(Error::Config(format!("tap layer {} beyond pretrained depth {depth}", taps[2])));
    }
    let vision = VisionTransformer {
        kind: BackendKind::ClipPretrained,
        resolution: enc.resolution,
        patch_size: p,
        width,
        taps,
        patch_weight,
        patch_bias: None,
        class_token: w.get("vision_model.embeddings.class_embedding")?,
        position,
        ln_pre: Some(w.ln("vision_model.pre_layrnorm")?),
        blocks,
        ln_post: Some(w.ln("vision_model.post_layernorm")?),
        projection: Some(w.get("visual_projection.weight")?.t()?.contiguous()?),
        pixel_mean: CLIP_PIXEL_MEAN,
        pixel_std: CLIP_PIXEL_STD,
        dtype,
    };

    let token_embedding = w.get("text_model.embeddings.token_embedding.weight")?;
    let text_width = token_embedding.dims()[1];
    let text_depth = w.count_layers("text_model.encoder.layers");
    let text_blocks = (0..text_depth)
        .map(|i| w.block(&format!("text_model.encoder.layers.{i}"), text_width))
        .collect::<Result<Vec<_>>>()?;
    let text_encoder = ClipTextEncoder {
        token_embedding,
        position: w.get("text_model.embeddings.position_embedding.weight")?,
        blocks: text_blocks,
        ln_final: w.ln("text_model.final_layer_norm")?,
        projection: w.get("text_projection.weight")?.t()?.contiguous()?,
        start_token: text.start_token,
        end_token: text.end_token,
    };
    if vision.out_dim() != text_encoder.projection.dims()[1] {
        return Err(Error::Config("vision and text projections disagree in width".into()));
    }
    if text.d_text != text_width {
        return Err(Error::Config(format!(
            "text.d_text = {} but pretrained token width is {text_width}",
            text.d_text
        )));
    }
    Ok((vision, text_encoder))
}
