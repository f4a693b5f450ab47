use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adam::Adam;
use crate::config::{DecoderPairing, NoiseTarget, RunConfig};
use crate::encoders::{
    encode_prompts, init_prompts, Backends, BlockParams, BlockShape, PatchFeatureMap, PromptSet,
    ResidualAttentionBlock, TextFeaturePair,
};
use crate::error::{Error, Result, StageExt};
use crate::fnp::{self, ControlMap, PromotedFeature};
use crate::fusion_moe::{self, GateAssignment, MixtureOfExperts, Projection};
use crate::nn::{self, Activation};
use crate::params::ParamStore;
use crate::sample::ImageSample;

pub const DECODER_DEPTH: usize = 3;
pub const GLOBAL_TOKEN: &str = "decoder.global_token";

/// Everything trainable plus optimizer progress. The frozen encoders are
/// rebuilt from `config` and never stored here.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: RunConfig,
    pub params: ParamStore,
    pub optimizer: Adam,
    /// Number of completed epochs.
    pub epoch: usize,
    pub seed: u64,
}

fn decoder_shape(cfg: &RunConfig) -> BlockShape {
    let c = cfg.feature_dim();
    BlockShape {
        dim: c,
        heads: cfg.model.decoder_heads,
        mlp_hidden: cfg.model.decoder_mlp_ratio * c,
        layer_norm: true,
        activation: Activation::Gelu,
    }
}

fn decoder_prefix(i: usize) -> String {
    format!("decoder.{i}")
}

impl ModelState {
    /// Fresh parameters drawn from `config.train.seed`.
    pub fn init(config: &RunConfig, backends: &Backends) -> Result<Self> {
        config.validate()?;
        let c = backends.feature_dim();
        if c != config.feature_dim() {
            return Err(Error::Config(format!(
                "backend width {c} != configured width {}",
                config.feature_dim()
            )));
        }
        let dtype = config.dtype();
        let seed = config.train.seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();

        if config.model.cnc {
            let t = &config.text;
            init_prompts(
                t.prompt_len,
                backends.text.token_dim(),
                t.init_std,
                rng.random(),
                &t.suffix_normal,
                &t.suffix_abnormal,
                dtype,
            )?
            .register(&mut params)?;
        }
        let inputs = if config.model.mlf { 3 } else { 1 };
        Projection::init(inputs, c, config.model.fusion_dropout, dtype, &mut rng)?.register(&mut params)?;
        if config.model.moe {
            MixtureOfExperts::init(
                c,
                config.moe.hidden_width(c),
                config.moe.num_experts,
                config.moe.top_k,
                dtype,
                &mut rng,
            )?
            .register(&mut params)?;
        }
        params.insert(GLOBAL_TOKEN, &nn::randn(&[c], 0.02, dtype, &mut rng)?)?;
        let shape = decoder_shape(config);
        let residual_scale = 1.0 / ((2 * DECODER_DEPTH) as f64).sqrt();
        for i in 0..DECODER_DEPTH {
            BlockParams::random(&shape, residual_scale, dtype, &mut rng)?.register(&mut params, &decoder_prefix(i))?;
        }
        Ok(Self {
            config: config.clone(),
            params,
            optimizer: Adam::new(&config.train),
            epoch: 0,
            seed,
        })
    }

    pub fn model<'a>(&self, backends: &'a Backends) -> Result<Model<'a>> {
        Model::new(self, backends)
    }
}

/// Outputs of one forward pass, everything the losses and scoring need.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub encoded: [PatchFeatureMap; 3],
    pub decoded: [PatchFeatureMap; 3],
    pub encoded_promoted: [PromotedFeature; 3],
    pub decoded_promoted: [PromotedFeature; 3],
    pub text: Option<[TextFeaturePair; 3]>,
    pub encoded_psi: Option<[ControlMap; 3]>,
    pub decoded_psi: Option<[ControlMap; 3]>,
    pub gates: Option<GateAssignment>,
}

/// Parameter view used for forward passes.
pub struct Model<'a> {
    pub config: RunConfig,
    pub backends: &'a Backends,
    pub prompts: Option<PromptSet>,
    pub projection: Projection,
    pub moe: Option<MixtureOfExperts>,
    pub global_token: Tensor,
    pub decoder: Vec<ResidualAttentionBlock>,
}

impl<'a> Model<'a> {
    pub fn new(state: &ModelState, backends: &'a Backends) -> Result<Self> {
        let cfg = &state.config;
        let p = &state.params;
        let prompts = if cfg.model.cnc {
            Some(PromptSet::from_store(p, &cfg.text.suffix_normal, &cfg.text.suffix_abnormal)?)
        } else {
            None
        };
        let moe = if cfg.model.moe {
            Some(MixtureOfExperts::from_store(p, cfg.moe.num_experts, cfg.moe.top_k)?)
        } else {
            None
        };
        let shape = decoder_shape(cfg);
        let decoder = (0..DECODER_DEPTH)
            .map(|i| ResidualAttentionBlock::new(BlockParams::from_store(p, &decoder_prefix(i), true)?, shape))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: cfg.clone(),
            backends,
            prompts,
            projection: Projection::from_store(p, cfg.model.fusion_dropout)?,
            moe,
            global_token: p.get(GLOBAL_TOKEN)?,
            decoder,
        })
    }

    pub fn text_features(&self) -> Result<Option<[TextFeaturePair; 3]>> {
        match &self.prompts {
            Some(p) => Ok(Some(encode_prompts(p, &self.backends.text)?)),
            None => Ok(None),
        }
    }

    /// Runs the model on raw images.
    pub fn forward<R: Rng>(&self, images: &[&ImageSample], training: bool, rng: &mut R) -> Result<ForwardOutput> {
        let encoded = self.backends.encode(images).stage("encode")?;
        self.forward_features(&encoded, training, rng)
    }

    /// Runs the model on precomputed (frozen) encoder features.
    pub fn forward_features<R: Rng>(
        &self,
        encoded: &[PatchFeatureMap; 3],
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let encoded = encoded.clone().map(|f| f.detach());
        let cfg = &self.config.model;
        let text = self.text_features().stage("text")?;

        let (encoded_promoted, encoded_psi) = promote_all(&encoded, text.as_ref()).stage("fnp")?;

        let sigma = match cfg.noise_into {
            NoiseTarget::FusionInput => cfg.noise_std,
            NoiseTarget::Off => 0.0,
        };
        let inputs: Vec<PatchFeatureMap> = if cfg.mlf {
            encoded.to_vec()
        } else {
            vec![encoded[2].clone()]
        };
        let noisy = inputs
            .iter()
            .map(|f| perturb(f, sigma, training, rng))
            .collect::<Result<Vec<_>>>()
            .stage("perturb")?;
        let refs: Vec<&PatchFeatureMap> = noisy.iter().collect();
        let fused = fusion_moe::fuse(&refs, &self.projection, training, rng).stage("fusion")?;

        let (mixed, gates) = match &self.moe {
            Some(moe) => {
                let (out, g) = moe.forward(&fused.patches).stage("moe")?;
                (out, Some(g))
            }
            None => (fused.patches, None),
        };

        let decoded = self.decode(&mixed, fused.grid).stage("decode")?;
        let fnp_text = match (&text, self.config.model.detach_text_in_fnp) {
            (Some(t), true) => Some(t.clone().map(|p| p.detach())),
            (t, _) => t.clone(),
        };
        let (decoded_promoted, decoded_psi) = promote_all(&decoded, fnp_text.as_ref()).stage("fnp")?;

        Ok(ForwardOutput {
            encoded,
            decoded,
            encoded_promoted,
            decoded_promoted,
            text,
            encoded_psi,
            decoded_psi,
            gates,
        })
    }

    /// Three decoder blocks over `[global token; patches]`; block outputs are
    /// paired with the encoder layers according to the configured order.
    pub fn decode(&self, x: &Tensor, grid: (usize, usize)) -> Result<[PatchFeatureMap; 3]> {
        decode_with(&self.decoder, &self.global_token, x, grid, self.config.model.decoder_pairing)
    }
}

pub(crate) fn decode_with(
    blocks: &[ResidualAttentionBlock],
    global_token: &Tensor,
    x: &Tensor,
    grid: (usize, usize),
    pairing: DecoderPairing,
) -> Result<[PatchFeatureMap; 3]> {
    let (b, l, c) = x.dims3()?;
    if blocks.len() != DECODER_DEPTH {
        return Err(Error::Config(format!("decoder needs {DECODER_DEPTH} blocks, got {}", blocks.len())));
    }
    let token = global_token.reshape((1, 1, c))?.broadcast_as((b, 1, c))?;
    let mut h = Tensor::cat(&[&token, x], 1)?;
    let mut outs = Vec::with_capacity(DECODER_DEPTH);
    for block in blocks {
        h = block.forward(&h, None)?;
        if !nn::all_finite(&h)? {
            return Err(Error::Divergence("decoder produced non-finite features".into()));
        }
        outs.push((h.narrow(1, 1, l)?, h.narrow(1, 0, 1)?.squeeze(1)?));
    }
    if pairing == DecoderPairing::Reverse {
        outs.reverse();
    }
    let mut maps = Vec::with_capacity(3);
    for (i, (patches, global)) in outs.into_iter().enumerate() {
        maps.push(PatchFeatureMap::new(patches, global, grid, i + 1)?);
    }
    Ok(maps.try_into().expect("three layers"))
}

fn promote_all(
    features: &[PatchFeatureMap; 3],
    text: Option<&[TextFeaturePair; 3]>,
) -> Result<([PromotedFeature; 3], Option<[ControlMap; 3]>)> {
    match text {
        Some(text) => {
            let mut promoted = Vec::with_capacity(3);
            let mut maps = Vec::with_capacity(3);
            for (f, t) in features.iter().zip(text) {
                let psi = fnp::control_map(f, t)?;
                promoted.push(fnp::promote(f, &psi)?);
                maps.push(psi);
            }
            Ok((
                promoted.try_into().expect("three layers"),
                Some(maps.try_into().expect("three layers")),
            ))
        }
        None => {
            let promoted = features
                .iter()
                .map(PromotedFeature::unpromoted)
                .collect::<Result<Vec<_>>>()?;
            Ok((promoted.try_into().expect("three layers"), None))
        }
    }
}

/// Adds `N(0, (σ·std(f))²)` noise to the patches when training; the standard
/// deviation is taken per image over the whole grid.
pub fn perturb<R: Rng>(feature: &PatchFeatureMap, sigma: f64, training: bool, rng: &mut R) -> Result<PatchFeatureMap> {
    if sigma < 0.0 {
        return Err(Error::Config(format!("noise std must be non-negative, got {sigma}")));
    }
    if !training || sigma == 0.0 {
        return Ok(feature.clone());
    }
    let f = &feature.patches;
    let (b, l, c) = f.dims3()?;
    let flat = f.reshape((b, l * c))?;
    let mean = flat.mean_keepdim(1)?;
    let std = flat.broadcast_sub(&mean)?.sqr()?.mean_keepdim(1)?.sqrt()?;
    let noise = nn::randn(&[b, l, c], 1.0, f.dtype(), rng)?;
    let scaled = noise.broadcast_mul(&(std * sigma)?.unsqueeze(2)?)?;
    Ok(PatchFeatureMap {
        patches: (f + scaled)?,
        ..feature.clone()
    })
}

/// Per-term losses for one batch.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub distill: f64,
    pub c1: f64,
    /// `None` while the decoded-feature term is inactive.
    pub c2: Option<f64>,
    pub constraint: f64,
    pub moe: f64,
}

impl LossBreakdown {
    pub fn total_value(&self) -> Result<f64> {
        nn::scalar_f64(&self.total)
    }
}

fn zero(dtype: DType) -> Result<Tensor> {
    Ok(Tensor::zeros((), dtype, &nn::CPU)?)
}

/// `L_distill + L_constraint + L_moe`, each term gated by its training switch.
pub fn total_loss(out: &ForwardOutput, epoch: usize, cfg: &RunConfig) -> Result<LossBreakdown> {
    let dtype = out.encoded[0].patches.dtype();
    let mut total = zero(dtype)?;
    let mut distill = 0.0;
    if cfg.train.use_distill_loss {
        let l = fnp::distill_loss(&out.encoded_promoted, &out.decoded_promoted).stage("distill")?;
        distill = nn::scalar_f64(&l)?;
        total = (total + l)?;
    }
    let (mut c1, mut c2, mut constraint) = (0.0, None, 0.0);
    if let (true, Some(text)) = (cfg.train.use_constraint_loss, &out.text) {
        let eg = out.encoded.clone().map(|f| f.global);
        let l1 = crate::normality::alignment_loss(&eg, text, &cfg.constraint).stage("constraint")?;
        c1 = nn::scalar_f64(&l1)?;
        let l = if crate::normality::decoded_term_active(epoch, &cfg.constraint) {
            let dg = out.decoded.clone().map(|f| f.global);
            let l2 = crate::normality::decoded_alignment_loss(&dg, text, &cfg.constraint).stage("constraint")?;
            c2 = Some(nn::scalar_f64(&l2)?);
            crate::normality::constraint_loss(epoch, &cfg.constraint, &l1, &l2)?
        } else {
            l1
        };
        constraint = nn::scalar_f64(&l)?;
        total = (total + l)?;
    }
    let mut moe = 0.0;
    if let (true, Some(g)) = (cfg.train.use_moe_loss, &out.gates) {
        let l = fusion_moe::importance_loss(&g.scores, cfg.moe.epsilon).stage("moe")?;
        moe = nn::scalar_f64(&l)?;
        total = (total + l)?;
    }
    let value = nn::scalar_f64(&total)?;
    if !value.is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite loss (distill {distill}, constraint {constraint}, moe {moe})"
        )));
    }
    Ok(LossBreakdown {
        total,
        distill,
        c1,
        c2,
        constraint,
        moe,
    })
}
