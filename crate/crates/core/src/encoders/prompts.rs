use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn;
use crate::params::ParamStore;

/// Learnable normal / abnormal context tokens for one tapped layer.
#[derive(Debug, Clone)]
pub struct PromptPair {
    /// `(M, D_text)`
    pub normal: Tensor,
    /// `(M, D_text)`
    pub abnormal: Tensor,
}

/// Three class-agnostic prompt pairs plus their fixed suffixes.
///
/// The normal prompt reads `[V1]…[VM][object]`, the abnormal one
/// `[W1]…[WM][damaged][object]`; only the `V`/`W` tokens are learnable.
#[derive(Debug, Clone)]
pub struct PromptSet {
    pub pairs: [PromptPair; 3],
    pub suffix_normal: Vec<u32>,
    pub suffix_abnormal: Vec<u32>,
}

impl PromptSet {
    pub fn len(&self) -> usize {
        self.pairs[0].normal.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token_dim(&self) -> usize {
        self.pairs[0].normal.dims()[1]
    }

    pub fn param_name(layer: usize, abnormal: bool) -> String {
        format!("prompt.{layer}.{}", if abnormal { "abnormal" } else { "normal" })
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<Self> {
        let mut pairs = Vec::with_capacity(3);
        for (i, pair) in self.pairs.iter().enumerate() {
            pairs.push(PromptPair {
                normal: store.insert(Self::param_name(i + 1, false), &pair.normal)?,
                abnormal: store.insert(Self::param_name(i + 1, true), &pair.abnormal)?,
            });
        }
        Ok(Self {
            pairs: pairs.try_into().expect("three pairs"),
            suffix_normal: self.suffix_normal.clone(),
            suffix_abnormal: self.suffix_abnormal.clone(),
        })
    }

    pub fn from_store(store: &ParamStore, suffix_normal: &[u32], suffix_abnormal: &[u32]) -> Result<Self> {
        let mut pairs = Vec::with_capacity(3);
        for i in 1..=3 {
            pairs.push(PromptPair {
                normal: store.get(&Self::param_name(i, false))?,
                abnormal: store.get(&Self::param_name(i, true))?,
            });
        }
        let set = Self {
            pairs: pairs.try_into().expect("three pairs"),
            suffix_normal: suffix_normal.to_vec(),
            suffix_abnormal: suffix_abnormal.to_vec(),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.pairs[0].normal.dims().to_vec();
        for pair in &self.pairs {
            if pair.normal.dims() != dims.as_slice() || pair.abnormal.dims() != dims.as_slice() {
                return Err(Error::Config("prompt token matrices differ in shape".into()));
            }
        }
        Ok(())
    }
}

/// Three prompt pairs with `N(0, std²)` tokens, reproducible per seed.
pub fn init_prompts(
    len: usize,
    d_text: usize,
    std: f64,
    seed: u64,
    suffix_normal: &[u32],
    suffix_abnormal: &[u32],
    dtype: DType,
) -> Result<PromptSet> {
    if len == 0 {
        return Err(Error::Config("prompt length must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(3);
    for _ in 0..3 {
        pairs.push(PromptPair {
            normal: nn::randn(&[len, d_text], std, dtype, &mut rng)?,
            abnormal: nn::randn(&[len, d_text], std, dtype, &mut rng)?,
        });
    }
    Ok(PromptSet {
        pairs: pairs.try_into().expect("three pairs"),
        suffix_normal: suffix_normal.to_vec(),
        suffix_abnormal: suffix_abnormal.to_vec(),
    })
}
