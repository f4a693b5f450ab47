//! Small differentiable building blocks on top of `candle_core` tensors.
//!
//! Everything here is composed from primitive ops that carry a backward
//! pass, so gradients flow through every layer used by the model.

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const CPU: Device = Device::Cpu;

/// `x · wᵀ + b` over the last dimension; `w` is `(out, in)`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let y = x.broadcast_matmul(&w.t()?)?;
    Ok(match b {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    })
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

/// Softmax over the last dimension, shifted by the (detached) row max.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

/// `log(exp(a) + exp(b)) - a`, i.e. `softplus(b - a)`, stable for large
/// logit gaps and exact in gradient at `a == b`.
pub fn neg_log_softmax_first(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let m = a.maximum(b)?.detach();
    let ea = a.sub(&m)?.exp()?;
    let eb = b.sub(&m)?.exp()?;
    let lse = ea.add(&eb)?.log()?.add(&m)?;
    Ok(lse.sub(a)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.neg()?.exp()?.affine(1.0, 1.0)?.recip()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// tanh-approximated GELU
    Gelu,
    /// `x · σ(1.702 x)` as used by the original CLIP towers
    QuickGelu,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        match self {
            Activation::Gelu => Ok(x.gelu()?),
            Activation::QuickGelu => Ok(x.mul(&sigmoid(&x.affine(1.702, 0.0)?)?)?),
        }
    }
}

/// L2-normalize along the last dimension.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Inverted dropout with a caller-owned RNG so runs stay reproducible.
pub fn dropout<R: Rng>(x: &Tensor, rate: f64, rng: &mut R) -> Result<Tensor> {
    if rate <= 0.0 {
        return Ok(x.clone());
    }
    if rate >= 1.0 {
        return Ok(x.zeros_like()?);
    }
    let keep = 1.0 / (1.0 - rate);
    let n = x.elem_count();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
    Ok(x.mul(&mask)?)
}

pub fn randn<R: Rng>(dims: &[usize], std: f64, dtype: DType, rng: &mut R) -> Result<Tensor> {
    let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    let n: usize = dims.iter().product();
    let data: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
    Ok(Tensor::from_vec(data, dims, &CPU)?.to_dtype(dtype)?)
}

pub fn zeros(dims: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::zeros(dims, dtype, &CPU)?)
}

pub fn ones(dims: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::ones(dims, dtype, &CPU)?)
}

/// Flattened copy of a tensor's values as `f64`.
pub fn to_f64_vec(x: &Tensor) -> Result<Vec<f64>> {
    Ok(x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn scalar_f64(x: &Tensor) -> Result<f64> {
    Ok(x.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

pub fn from_f64(data: Vec<f64>, dims: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, dims, &CPU)?.to_dtype(dtype)?)
}

pub fn all_finite(x: &Tensor) -> Result<bool> {
    Ok(to_f64_vec(x)?.iter().all(|v| v.is_finite()))
}
