//! Frozen vision/text encoders, the shared attention block and the
//! learnable prompt container.

pub mod block;
pub mod clip;
pub mod prompts;
pub mod text;
pub mod vision;

pub use block::{BlockParams, BlockShape, ResidualAttentionBlock};
pub use prompts::{init_prompts, PromptPair, PromptSet};
pub use text::{encode_prompts, TextBackend, TextFeaturePair, ToyTextEncoder};
pub use vision::{PatchFeatureMap, VisionTransformer};

use sha2::{Digest, Sha256};

use crate::config::{BackendKind, RunConfig};
use crate::error::{Error, Result};
use crate::nn;
use crate::sample::ImageSample;

/// The frozen pair of encoders a model is trained against.
#[derive(Debug, Clone)]
pub struct Backends {
    pub vision: VisionTransformer,
    pub text: TextBackend,
}

impl Backends {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let dtype = cfg.dtype();
        match cfg.encoder.backend {
            BackendKind::ToyFrozenRandom => {
                let vision = VisionTransformer::toy(&cfg.encoder, dtype)?;
                let text = ToyTextEncoder::new(&cfg.text, vision.out_dim(), dtype)?;
                Ok(Self {
                    vision,
                    text: TextBackend::Toy(text),
                })
            }
            BackendKind::ClipPretrained => {
                let path = cfg.encoder.weights_path.as_ref().ok_or_else(|| {
                    Error::Config("clip_pretrained backend needs encoder.weights_path".into())
                })?;
                let (vision, text) = clip::load_clip(path, &cfg.encoder, &cfg.text, dtype)?;
                Ok(Self {
                    vision,
                    text: TextBackend::Clip(text),
                })
            }
        }
    }

    /// Feature width C shared by patches, globals and text features.
    pub fn feature_dim(&self) -> usize {
        self.vision.out_dim()
    }

    pub fn encode(&self, images: &[&ImageSample]) -> Result<[PatchFeatureMap; 3]> {
        self.vision.encode(images)
    }

    /// SHA-256 over the encoder's tapped features for `images`.
    pub fn feature_digest(&self, images: &[&ImageSample]) -> Result<String> {
        let maps = self.encode(images)?;
        let mut hasher = Sha256::new();
        for m in &maps {
            for t in [&m.patches, &m.global] {
                for v in nn::to_f64_vec(t)? {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        Ok(hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }
}
