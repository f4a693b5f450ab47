//! Feature-level normality promotion.
//!
//! A per-patch control map `Ψ = ½(1 + tanh(f·g_n − f·g_a))` is scaled by
//! `1/‖f‖` and added to every channel of the patch grid. The distillation
//! loss compares the promoted encoder and decoder grids with one cosine per
//! layer over the flattened tensor.

use candle_core::{DType, Tensor, D};

use crate::encoders::{PatchFeatureMap, TextFeaturePair};
use crate::error::{Error, Result};
use crate::nn;

/// `(batch, H·W)` values in (0, 1).
#[derive(Debug, Clone)]
pub struct ControlMap {
    pub values: Tensor,
    pub source_layer: usize,
}

#[derive(Debug, Clone)]
pub struct PromotedFeature {
    /// `(batch, H·W, C)`
    pub patches: Tensor,
    /// `(batch,)`, the per-image `1/‖f‖`; zero for an unpromoted feature.
    pub lambda: Tensor,
    pub grid: (usize, usize),
}

impl PromotedFeature {
    /// Wraps a raw feature without promotion (`f* = f`).
    pub fn unpromoted(feature: &PatchFeatureMap) -> Result<Self> {
        Ok(Self {
            patches: feature.patches.clone(),
            lambda: Tensor::zeros(feature.batch(), feature.patches.dtype(), feature.patches.device())?,
            grid: feature.grid,
        })
    }

    /// Undo the promotion: `f* − λΨ` broadcast over channels.
    pub fn recover(&self, psi: &ControlMap) -> Result<Tensor> {
        let offset = psi.values.broadcast_mul(&self.lambda.unsqueeze(1)?)?.unsqueeze(2)?;
        Ok(self.patches.broadcast_sub(&offset)?)
    }
}

pub fn control_map(feature: &PatchFeatureMap, text: &TextFeaturePair) -> Result<ControlMap> {
    if feature.dim() != text.dim() {
        return Err(Error::Config(format!(
            "patch width {} != text width {}",
            feature.dim(),
            text.dim()
        )));
    }
    let f = &feature.patches;
    let alpha = f.broadcast_mul(&text.normal.reshape((1, 1, text.dim()))?)?.sum(D::Minus1)?;
    let beta = f.broadcast_mul(&text.abnormal.reshape((1, 1, text.dim()))?)?.sum(D::Minus1)?;
    let diff = alpha.sub(&beta)?;
    // tanh in double precision so large gaps saturate no earlier than necessary.
    let dtype = diff.dtype();
    let tanh = diff.to_dtype(DType::F64)?.tanh()?.to_dtype(dtype)?;
    Ok(ControlMap {
        values: tanh.affine(0.5, 0.5)?,
        source_layer: feature.layer,
    })
}

/// `f + (1/‖f‖)·Ψ`, the map broadcast across every channel.
pub fn promote(feature: &PatchFeatureMap, psi: &ControlMap) -> Result<PromotedFeature> {
    let f = &feature.patches;
    let (b, l, _) = f.dims3()?;
    if psi.values.dims() != [b, l] {
        return Err(Error::Config(format!(
            "control map {:?} does not match feature grid ({b}, {l})",
            psi.values.dims()
        )));
    }
    let norm = f.sqr()?.sum(D::Minus1)?.sum(D::Minus1)?.sqrt()?;
    if nn::to_f64_vec(&norm)?.iter().any(|n| !(*n > 0.0)) {
        return Err(Error::Degenerate(format!("layer {} feature has zero norm", feature.layer)));
    }
    let lambda = norm.recip()?;
    let offset = psi.values.broadcast_mul(&lambda.unsqueeze(1)?)?.unsqueeze(2)?;
    Ok(PromotedFeature {
        patches: f.broadcast_add(&offset)?,
        lambda,
        grid: feature.grid,
    })
}

/// `Σ_i (1 − cos(Flat(f*_i), Flat(f̂*_i)))`, averaged over the batch.
pub fn distill_loss(encoded: &[PromotedFeature; 3], decoded: &[PromotedFeature; 3]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for (i, (e, d)) in encoded.iter().zip(decoded).enumerate() {
        if e.patches.dims() != d.patches.dims() {
            return Err(Error::Config(format!(
                "layer {} shapes differ: {:?} vs {:?}",
                i + 1,
                e.patches.dims(),
                d.patches.dims()
            )));
        }
        let b = e.patches.dims()[0];
        let ef = e.patches.reshape((b, ()))?;
        let df = d.patches.reshape((b, ()))?;
        let en = ef.sqr()?.sum(1)?.sqrt()?;
        let dn = df.sqr()?.sum(1)?.sqrt()?;
        if nn::to_f64_vec(&en)?.iter().chain(&nn::to_f64_vec(&dn)?).any(|n| !(*n > 0.0)) {
            return Err(Error::Degenerate(format!("layer {} flattened feature has zero norm", i + 1)));
        }
        let cos = ef.mul(&df)?.sum(1)?.div(&en.mul(&dn)?)?;
        let term = cos.affine(-1.0, 1.0)?.mean_all()?;
        total = Some(match total {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    Ok(total.expect("three layers"))
}
