//! Run configuration: one TOML document with a section per subsystem.
//!
//! Every key has a default, unknown keys are rejected, and the effective
//! configuration can be written back out verbatim.

use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    ToyFrozenRandom,
    ClipPretrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub backend: BackendKind,
    /// Number of residual attention blocks.
    pub depth: usize,
    /// 1-based tapped block indices; evenly spaced thirds when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tap_layers: Option<[usize; 3]>,
    pub resolution: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub layer_norm: bool,
    pub activation: Activation,
    pub seed: u64,
    /// safetensors file for the `clip_pretrained` backend.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights_path: Option<PathBuf>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::ToyFrozenRandom,
            depth: 6,
            tap_layers: None,
            resolution: 224,
            patch_size: 16,
            embed_dim: 64,
            num_heads: 4,
            mlp_ratio: 4,
            layer_norm: true,
            activation: Activation::Gelu,
            seed: 0,
            weights_path: None,
        }
    }
}

impl EncoderConfig {
    pub fn taps(&self) -> [usize; 3] {
        self.tap_layers.unwrap_or_else(|| default_taps(self.depth))
    }

    pub fn grid(&self) -> usize {
        self.resolution / self.patch_size
    }
}

/// Evenly spaced thirds of the encoder depth, e.g. 24 → 8/16/24.
pub fn default_taps(depth: usize) -> [usize; 3] {
    let third = |k: usize| ((k * depth) / 3).max(k);
    [third(1), third(2), depth.max(3)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextConfig {
    /// Token embedding width of the text encoder.
    pub d_text: usize,
    /// Learnable prompt length.
    pub prompt_len: usize,
    pub vocab_size: usize,
    /// Token ids of the fixed `[object]` suffix.
    pub suffix_normal: Vec<u32>,
    /// Token ids of the fixed `[damaged][object]` suffix.
    pub suffix_abnormal: Vec<u32>,
    pub init_std: f64,
    pub seed: u64,
    pub start_token: u32,
    pub end_token: u32,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            d_text: 32,
            prompt_len: 12,
            vocab_size: 64,
            suffix_normal: vec![1],
            suffix_abnormal: vec![2, 1],
            init_std: 0.02,
            seed: 1,
            start_token: 49406,
            end_token: 49407,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseTarget {
    FusionInput,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderPairing {
    /// Decoder block i reconstructs tapped layer i.
    Matching,
    /// Decoder block i reconstructs tapped layer 4 − i.
    Reverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub precision: Precision,
    /// Multi-layer fusion; when off only the deepest tapped layer feeds the projection.
    pub mlf: bool,
    /// Prompts, normality promotion and the constraint losses.
    pub cnc: bool,
    /// Gated mixture of experts between fusion and decoder.
    pub moe: bool,
    pub fusion_dropout: f64,
    pub noise_std: f64,
    pub noise_into: NoiseTarget,
    pub decoder_pairing: DecoderPairing,
    pub decoder_heads: usize,
    pub decoder_mlp_ratio: usize,
    /// Stop gradients from the distillation loss into the text features.
    pub detach_text_in_fnp: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            precision: Precision::F32,
            mlf: true,
            cnc: true,
            moe: true,
            fusion_dropout: 0.1,
            noise_std: 0.2,
            noise_into: NoiseTarget::FusionInput,
            decoder_pairing: DecoderPairing::Matching,
            decoder_heads: 4,
            decoder_mlp_ratio: 4,
            detach_text_in_fnp: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstraintConfig {
    pub tau: f64,
    pub gamma: f64,
    /// First epoch (0-based) at which the decoded-feature term is added.
    pub theta: usize,
    /// L2-normalize global features before the dot product with text features.
    pub normalize_globals: bool,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self {
            tau: 0.001,
            gamma: 0.1,
            theta: 5,
            normalize_globals: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoEConfig {
    pub num_experts: usize,
    pub top_k: usize,
    /// Expert hidden width; 4·C when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    pub epsilon: f64,
}

impl Default for MoEConfig {
    fn default() -> Self {
        Self {
            num_experts: 5,
            top_k: 2,
            hidden: None,
            epsilon: 1e-10,
        }
    }
}

impl MoEConfig {
    pub fn hidden_width(&self, dim: usize) -> usize {
        self.hidden.unwrap_or(4 * dim)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub use_distill_loss: bool,
    pub use_constraint_loss: bool,
    pub use_moe_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 250,
            batch_size: 8,
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            checkpoint_every: 0,
            use_distill_loss: true,
            use_constraint_loss: true,
            use_moe_loss: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub fpr_limit: f64,
    /// 4 or 8.
    pub connectivity: u8,
    /// Gaussian smoothing of the score map; 0 disables it.
    pub smoothing_sigma: f64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            fpr_limit: 0.3,
            connectivity: 8,
            smoothing_sigma: 0.0,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub text: TextConfig,
    pub model: ModelConfig,
    pub constraint: ConstraintConfig,
    pub moe: MoEConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config serialize: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn dtype(&self) -> DType {
        self.model.precision.dtype()
    }

    /// Feature width C seen by losses, fusion and decoder.
    pub fn feature_dim(&self) -> usize {
        self.encoder.embed_dim
    }

    /// Sections that determine parameter shapes; checkpoints must agree on these.
    pub fn architecture_fingerprint(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Arch<'a> {
            encoder: &'a EncoderConfig,
            text: &'a TextConfig,
            model: &'a ModelConfig,
            moe: &'a MoEConfig,
        }
        toml::to_string(&Arch {
            encoder: &self.encoder,
            text: &self.text,
            model: &self.model,
            moe: &self.moe,
        })
        .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let bad = |msg: String| Err(Error::Config(msg));
        if e.depth < 3 && e.tap_layers.is_none() {
            return bad(format!("encoder depth {} < 3 needs explicit tap_layers", e.depth));
        }
        let [a, b, c] = e.taps();
        if !(1 <= a && a < b && b < c && c <= e.depth) {
            return bad(format!("tap layers {a},{b},{c} must satisfy 1 ≤ i1 < i2 < i3 ≤ {}", e.depth));
        }
        if e.patch_size == 0 || e.resolution % e.patch_size != 0 {
            return bad(format!(
                "resolution {} must be a multiple of patch size {}",
                e.resolution, e.patch_size
            ));
        }
        if e.num_heads == 0 || e.embed_dim % e.num_heads != 0 {
            return bad(format!("embed_dim {} not divisible by {} heads", e.embed_dim, e.num_heads));
        }
        if self.model.decoder_heads == 0 || self.feature_dim() % self.model.decoder_heads != 0 {
            return bad("decoder heads must divide the feature width".into());
        }
        let t = &self.text;
        if t.prompt_len == 0 {
            return bad("prompt_len must be ≥ 1".into());
        }
        if t.suffix_normal.iter().chain(&t.suffix_abnormal).any(|&id| id as usize >= t.vocab_size)
            && e.backend == BackendKind::ToyFrozenRandom
        {
            return bad("suffix token id outside the text vocabulary".into());
        }
        if !(self.constraint.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.constraint.tau));
        }
        if self.constraint.gamma < 0.0 {
            return bad("gamma must be nonnegative".into());
        }
        let m = &self.moe;
        if m.top_k == 0 || m.top_k > m.num_experts {
            return bad(format!("need 1 ≤ K ≤ T, got K={} T={}", m.top_k, m.num_experts));
        }
        if !(0.0..1.0).contains(&self.model.fusion_dropout) {
            return bad("fusion_dropout must lie in [0, 1)".into());
        }
        if self.model.noise_std < 0.0 {
            return bad("noise_std must be nonnegative".into());
        }
        if self.train.batch_size == 0 || self.eval.batch_size == 0 {
            return bad("batch size must be ≥ 1".into());
        }
        if !(self.eval.fpr_limit > 0.0 && self.eval.fpr_limit <= 1.0) {
            return bad("fpr_limit must lie in (0, 1]".into());
        }
        if !matches!(self.eval.connectivity, 4 | 8) {
            return bad("connectivity must be 4 or 8".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_published_hyperparameters() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.constraint.tau, 0.001);
        assert_eq!(cfg.constraint.gamma, 0.1);
        assert_eq!(cfg.constraint.theta, 5);
        assert_eq!((cfg.moe.num_experts, cfg.moe.top_k), (5, 2));
        assert_eq!(cfg.text.prompt_len, 12);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.train.learning_rate, 0.001);
        assert_eq!(cfg.train.epochs, 250);
        assert_eq!(cfg.encoder.resolution, 224);
        cfg.validate().unwrap();
    }

    #[test]
    fn thirds_of_depth() {
        assert_eq!(default_taps(24), [8, 16, 24]);
        assert_eq!(default_taps(6), [2, 4, 6]);
        assert_eq!(default_taps(3), [1, 2, 3]);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.encoder.tap_layers = Some([1, 3, 5]);
        cfg.moe.hidden = Some(16);
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml_str("[moe]\nnum_expert = 4\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = RunConfig::from_toml_str("[bogus]\nx = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let cfg = RunConfig::from_toml_str("[moe]\nnum_experts = 3\ntop_k = 1\n").unwrap();
        assert_eq!(cfg.moe.num_experts, 3);
        assert_eq!(cfg.constraint.tau, 0.001);
    }

    #[test]
    fn invalid_values_are_rejected() {
        for doc in [
            "[moe]\nnum_experts = 2\ntop_k = 3\n",
            "[constraint]\ntau = 0.0\n",
            "[encoder]\ntap_layers = [4, 2, 6]\n",
            "[encoder]\nresolution = 65\n",
            "[eval]\nconnectivity = 6\n",
        ] {
            assert!(RunConfig::from_toml_str(doc).is_err(), "{doc}");
        }
    }
}
