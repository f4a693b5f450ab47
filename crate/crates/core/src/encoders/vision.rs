//! Frozen ViT-style vision encoder with three tapped layers.

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::block::{BlockParams, BlockShape, LayerNormParams, ResidualAttentionBlock};
use crate::config::{BackendKind, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn;
use crate::sample::ImageSample;

pub const CLIP_PIXEL_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const CLIP_PIXEL_STD: [f32; 3] = [0.268_629_54, 0.261_302_6, 0.275_777_1];

/// Patch features of one tapped layer for a batch of images.
#[derive(Debug, Clone)]
pub struct PatchFeatureMap {
    /// `(batch, H·W, C)`, patches in row-major grid order.
    pub patches: Tensor,
    /// `(batch, C)`
    pub global: Tensor,
    pub grid: (usize, usize),
    /// 1, 2 or 3.
    pub layer: usize,
}

impl PatchFeatureMap {
    pub fn new(patches: Tensor, global: Tensor, grid: (usize, usize), layer: usize) -> Result<Self> {
        let (b, l, c) = patches.dims3()?;
        if l != grid.0 * grid.1 {
            return Err(Error::Config(format!("{l} patches do not fill a {}×{} grid", grid.0, grid.1)));
        }
        if global.dims() != [b, c] {
            return Err(Error::Config(format!(
                "global feature shape {:?} does not match ({b}, {c})",
                global.dims()
            )));
        }
        Ok(Self {
            patches,
            global,
            grid,
            layer,
        })
    }

    pub fn batch(&self) -> usize {
        self.patches.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.patches.dims()[2]
    }

    pub fn num_patches(&self) -> usize {
        self.patches.dims()[1]
    }

    pub fn detach(&self) -> Self {
        Self {
            patches: self.patches.detach(),
            global: self.global.detach(),
            grid: self.grid,
            layer: self.layer,
        }
    }

    pub fn is_finite(&self) -> Result<bool> {
        Ok(nn::all_finite(&self.patches)? && nn::all_finite(&self.global)?)
    }

    /// Selects batch rows.
    pub fn select(&self, rows: &Tensor) -> Result<Self> {
        Ok(Self {
            patches: self.patches.index_select(rows, 0)?,
            global: self.global.index_select(rows, 0)?,
            grid: self.grid,
            layer: self.layer,
        })
    }

    pub fn cat(parts: &[&PatchFeatureMap]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Input("nothing to concatenate".into()))?;
        let patches: Vec<&Tensor> = parts.iter().map(|p| &p.patches).collect();
        let globals: Vec<&Tensor> = parts.iter().map(|p| &p.global).collect();
        Self::new(Tensor::cat(&patches, 0)?, Tensor::cat(&globals, 0)?, first.grid, first.layer)
    }
}

#[derive(Debug, Clone)]
pub struct VisionTransformer {
    pub kind: BackendKind,
    pub resolution: usize,
    pub patch_size: usize,
    pub width: usize,
    pub taps: [usize; 3],
    pub(crate) patch_weight: Tensor,
    pub(crate) patch_bias: Option<Tensor>,
    pub(crate) class_token: Tensor,
    pub(crate) position: Tensor,
    pub(crate) ln_pre: Option<LayerNormParams>,
    pub(crate) blocks: Vec<ResidualAttentionBlock>,
    /// Applied to tapped tokens before the optional projection.
    pub(crate) ln_post: Option<LayerNormParams>,
    /// `(width, out_dim)`; maps tapped tokens into the text feature space.
    pub(crate) projection: Option<Tensor>,
    pub(crate) pixel_mean: [f32; 3],
    pub(crate) pixel_std: [f32; 3],
    pub dtype: DType,
}

impl VisionTransformer {
    /// Randomly initialised frozen backend; identical seeds give bit-identical weights.
    pub fn toy(cfg: &EncoderConfig, dtype: DType) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let c = cfg.embed_dim;
        let p = cfg.patch_size;
        let fan_in = 3 * p * p;
        let grid = cfg.grid();
        let shape = BlockShape {
            dim: c,
            heads: cfg.num_heads,
            mlp_hidden: cfg.mlp_ratio * c,
            layer_norm: cfg.layer_norm,
            activation: cfg.activation,
        };
        let patch_weight = nn::randn(&[c, fan_in], 1.0 / (fan_in as f64).sqrt(), dtype, &mut rng)?;
        let class_token = nn::randn(&[c], 1.0, dtype, &mut rng)?;
        let position = nn::randn(&[grid * grid + 1, c], 0.1, dtype, &mut rng)?;
        let residual_scale = 1.0 / ((2 * cfg.depth) as f64).sqrt();
        let blocks = (0..cfg.depth)
            .map(|_| {
                ResidualAttentionBlock::new(
                    BlockParams::random(&shape, residual_scale, dtype, &mut rng)?,
                    shape,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kind: BackendKind::ToyFrozenRandom,
            resolution: cfg.resolution,
            patch_size: p,
            width: c,
            taps: cfg.taps(),
            patch_weight,
            patch_bias: None,
            class_token,
            position,
            ln_pre: None,
            blocks,
            ln_post: None,
            projection: None,
            pixel_mean: CLIP_PIXEL_MEAN,
            pixel_std: CLIP_PIXEL_STD,
            dtype,
        })
    }

    pub fn grid(&self) -> usize {
        self.resolution / self.patch_size
    }

    /// Width C of the emitted features.
    pub fn out_dim(&self) -> usize {
        self.projection.as_ref().map_or(self.width, |p| p.dims()[1])
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// `(batch, H·W, 3·p²)` normalized patch vectors, channel-major within a
    /// patch to match a conv-style `(C, 3, p, p)` kernel.
    pub fn patchify(&self, images: &[&ImageSample]) -> Result<Tensor> {
        let p = self.patch_size;
        let g = self.grid();
        let per_patch = 3 * p * p;
        let mut data = Vec::with_capacity(images.len() * g * g * per_patch);
        for img in images {
            if img.height != self.resolution || img.width != self.resolution {
                return Err(Error::Input(format!(
                    "image is {}×{}, encoder expects {r}×{r}",
                    img.height,
                    img.width,
                    r = self.resolution
                )));
            }
            for gy in 0..g {
                for gx in 0..g {
                    for ch in 0..3 {
                        for ky in 0..p {
                            for kx in 0..p {
                                let v = img.pixel(gy * p + ky, gx * p + kx)[ch];
                                data.push(((v - self.pixel_mean[ch]) / self.pixel_std[ch]) as f64);
                            }
                        }
                    }
                }
            }
        }
        nn::from_f64(data, &[images.len(), g * g, per_patch], self.dtype)
    }

    pub fn encode(&self, images: &[&ImageSample]) -> Result<[PatchFeatureMap; 3]> {
        if images.is_empty() {
            return Err(Error::Input("empty image batch".into()));
        }
        let patches = self.patchify(images)?;
        self.encode_patches(&patches)
    }

    pub fn encode_patches(&self, patches: &Tensor) -> Result<[PatchFeatureMap; 3]> {
        let (b, l, _) = patches.dims3()?;
        let g = self.grid();
        let emb = nn::linear(patches, &self.patch_weight, self.patch_bias.as_ref())?;
        let cls = self.class_token.reshape((1, 1, self.width))?.broadcast_as((b, 1, self.width))?;
        let mut x = Tensor::cat(&[&cls, &emb], 1)?.broadcast_add(&self.position)?;
        if let Some(ln) = &self.ln_pre {
            x = nn::layer_norm(&x, &ln.gamma, &ln.beta, 1e-5)?;
        }
        let mut taps = Vec::with_capacity(3);
        for (i, block) in self.blocks.iter().take(self.taps[2]).enumerate() {
            x = block.forward(&x, None)?;
            for slot in (0..3).filter(|&s| self.taps[s] == i + 1) {
                let mut tokens = x.clone();
                if let Some(ln) = &self.ln_post {
                    tokens = nn::layer_norm(&tokens, &ln.gamma, &ln.beta, 1e-5)?;
                }
                if let Some(proj) = &self.projection {
                    tokens = tokens.broadcast_matmul(proj)?;
                }
                let c = tokens.dims()[2];
                let global = tokens.narrow(1, 0, 1)?.reshape((b, c))?;
                let grid_tokens = tokens.narrow(1, 1, l)?.contiguous()?;
                let map = PatchFeatureMap::new(grid_tokens, global, (g, g), slot + 1)?;
                if !map.is_finite()? {
                    return Err(Error::Backend(format!("non-finite features at block {}", i + 1)));
                }
                taps.push(map);
            }
        }
        let taps: [PatchFeatureMap; 3] = taps
            .try_into()
            .map_err(|_| Error::Config("encoder depth below the deepest tap layer".into()))?;
        Ok(taps)
    }
}
