//! Cross-modal normality constraint: alignment of encoded and decoded
//! global features with the learned normal text anchors.

use candle_core::{Tensor, D};

use crate::config::ConstraintConfig;
use crate::encoders::TextFeaturePair;
use crate::error::{Error, Result};
use crate::nn;

/// `Σ_i −log softmax(e_i·g_n/τ, e_i·g_a/τ)[normal]`, averaged over the batch.
///
/// `globals[i]` is `(batch, C)`. Each per-layer term is evaluated as the
/// softplus of the negative logit gap so τ = 0.001 cannot overflow.
pub fn alignment_loss(
    globals: &[Tensor; 3],
    text: &[TextFeaturePair; 3],
    cfg: &ConstraintConfig,
) -> Result<Tensor> {
    if !(cfg.tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {}", cfg.tau)));
    }
    let mut total: Option<Tensor> = None;
    for (e, t) in globals.iter().zip(text) {
        let (_, c) = e.dims2()?;
        if c != t.dim() {
            return Err(Error::Config(format!("global width {c} != text width {}", t.dim())));
        }
        let e = if cfg.normalize_globals { nn::l2_normalize(e)? } else { e.clone() };
        let logit = |g: &Tensor| -> Result<Tensor> {
            Ok((e.broadcast_mul(&g.unsqueeze(0)?)?.sum(D::Minus1)? / cfg.tau)?)
        };
        let term = nn::neg_log_softmax_first(&logit(&t.normal)?, &logit(&t.abnormal)?)?.mean_all()?;
        total = Some(match total {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    Ok(total.expect("three layers"))
}

/// Same objective applied to the decoder's global features.
pub fn decoded_alignment_loss(
    decoded_globals: &[Tensor; 3],
    text: &[TextFeaturePair; 3],
    cfg: &ConstraintConfig,
) -> Result<Tensor> {
    alignment_loss(decoded_globals, text, cfg)
}

/// Whether the decoded-feature term is part of the constraint at `epoch`.
pub fn decoded_term_active(epoch: usize, cfg: &ConstraintConfig) -> bool {
    epoch >= cfg.theta
}

/// `L1` before epoch ϑ, `L1 + γ·L2` from epoch ϑ on.
pub fn constraint_loss(epoch: usize, cfg: &ConstraintConfig, l1: &Tensor, l2: &Tensor) -> Result<Tensor> {
    if decoded_term_active(epoch, cfg) && cfg.gamma != 0.0 {
        Ok((l1 + (l2 * cfg.gamma)?)?)
    } else {
        Ok(l1.clone())
    }
}

pub fn constraint_value(epoch: usize, cfg: &ConstraintConfig, l1: f64, l2: f64) -> f64 {
    if decoded_term_active(epoch, cfg) {
        l1 + cfg.gamma * l2
    } else {
        l1
    }
}
