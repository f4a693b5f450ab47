//! Pre-norm residual attention block, the basic ViT unit shared by the
//! frozen encoder and the trainable decoder.

use candle_core::{DType, Tensor};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{self, Activation};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockShape {
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub layer_norm: bool,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1: Option<LayerNormParams>,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2: Option<LayerNormParams>,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

const NAMES: [&str; 12] = [
    "attn.q.weight",
    "attn.q.bias",
    "attn.k.weight",
    "attn.k.bias",
    "attn.v.weight",
    "attn.v.bias",
    "attn.out.weight",
    "attn.out.bias",
    "mlp.fc1.weight",
    "mlp.fc1.bias",
    "mlp.fc2.weight",
    "mlp.fc2.bias",
];

impl BlockParams {
    /// Fan-in scaled Gaussian init; output projections are further scaled by
    /// `residual_scale`.
    pub fn random<R: Rng>(
        shape: &BlockShape,
        residual_scale: f64,
        dtype: DType,
        rng: &mut R,
    ) -> Result<Self> {
        let c = shape.dim;
        let h = shape.mlp_hidden;
        let w = |rows: usize, cols: usize, scale: f64, rng: &mut R| {
            nn::randn(&[rows, cols], scale / (cols as f64).sqrt(), dtype, rng)
        };
        let zeros = |n: usize| nn::zeros(&[n], dtype);
        let ln = || -> Result<Option<LayerNormParams>> {
            Ok(shape.layer_norm.then_some(LayerNormParams {
                gamma: nn::ones(&[c], dtype)?,
                beta: nn::zeros(&[c], dtype)?,
            }))
        };
        Ok(Self {
            ln1: ln()?,
            wq: w(c, c, 1.0, rng)?,
            bq: zeros(c)?,
            wk: w(c, c, 1.0, rng)?,
            bk: zeros(c)?,
            wv: w(c, c, 1.0, rng)?,
            bv: zeros(c)?,
            wo: w(c, c, residual_scale, rng)?,
            bo: zeros(c)?,
            ln2: ln()?,
            w1: w(h, c, 1.0, rng)?,
            b1: zeros(h)?,
            w2: w(c, h, residual_scale, rng)?,
            b2: zeros(c)?,
        })
    }

    /// All-zero attention and MLP weights: the block reduces to the identity.
    pub fn zeros(shape: &BlockShape, dtype: DType) -> Result<Self> {
        let c = shape.dim;
        let h = shape.mlp_hidden;
        let z = |dims: &[usize]| nn::zeros(dims, dtype);
        let ln = || -> Result<Option<LayerNormParams>> {
            Ok(shape.layer_norm.then_some(LayerNormParams {
                gamma: nn::ones(&[c], dtype)?,
                beta: nn::zeros(&[c], dtype)?,
            }))
        };
        Ok(Self {
            ln1: ln()?,
            wq: z(&[c, c])?,
            bq: z(&[c])?,
            wk: z(&[c, c])?,
            bk: z(&[c])?,
            wv: z(&[c, c])?,
            bv: z(&[c])?,
            wo: z(&[c, c])?,
            bo: z(&[c])?,
            ln2: ln()?,
            w1: z(&[h, c])?,
            b1: z(&[h])?,
            w2: z(&[c, h])?,
            b2: z(&[c])?,
        })
    }

    fn dense(&self) -> [&Tensor; 12] {
        [
            &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo,
            &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    /// Moves every tensor into `store` under `prefix` and returns the
    /// trainable handles.
    pub fn register(&self, store: &mut ParamStore, prefix: &str) -> Result<Self> {
        let mut handles = Vec::with_capacity(12);
        for (name, t) in NAMES.iter().zip(self.dense()) {
            handles.push(store.insert(format!("{prefix}.{name}"), t)?);
        }
        let mut ln = |tag: &str, p: &Option<LayerNormParams>| -> Result<Option<LayerNormParams>> {
            p.as_ref()
                .map(|p| {
                    Ok(LayerNormParams {
                        gamma: store.insert(format!("{prefix}.{tag}.weight"), &p.gamma)?,
                        beta: store.insert(format!("{prefix}.{tag}.bias"), &p.beta)?,
                    })
                })
                .transpose()
        };
        let ln1 = ln("ln1", &self.ln1)?;
        let ln2 = ln("ln2", &self.ln2)?;
        Ok(Self::assemble(ln1, ln2, handles))
    }

    pub fn from_store(store: &ParamStore, prefix: &str, layer_norm: bool) -> Result<Self> {
        let handles = NAMES
            .iter()
            .map(|name| store.get(&format!("{prefix}.{name}")))
            .collect::<Result<Vec<_>>>()?;
        let ln = |tag: &str| -> Result<Option<LayerNormParams>> {
            if !layer_norm {
                return Ok(None);
            }
            Ok(Some(LayerNormParams {
                gamma: store.get(&format!("{prefix}.{tag}.weight"))?,
                beta: store.get(&format!("{prefix}.{tag}.bias"))?,
            }))
        };
        Ok(Self::assemble(ln("ln1")?, ln("ln2")?, handles))
    }

    fn assemble(ln1: Option<LayerNormParams>, ln2: Option<LayerNormParams>, h: Vec<Tensor>) -> Self {
        let mut it = h.into_iter();
        let mut next = || it.next().expect("twelve dense tensors");
        Self {
            ln1,
            wq: next(),
            bq: next(),
            wk: next(),
            bk: next(),
            wv: next(),
            bv: next(),
            wo: next(),
            bo: next(),
            ln2,
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResidualAttentionBlock {
    pub params: BlockParams,
    pub shape: BlockShape,
    pub eps: f64,
}

impl ResidualAttentionBlock {
    pub fn new(params: BlockParams, shape: BlockShape) -> Result<Self> {
        let c = shape.dim;
        if shape.heads == 0 || c % shape.heads != 0 {
            return Err(Error::Config(format!("{} heads do not divide width {c}", shape.heads)));
        }
        let expect = |t: &Tensor, dims: &[usize], what: &str| -> Result<()> {
            if t.dims() != dims {
                return Err(Error::Config(format!(
                    "block parameter {what} has shape {:?}, expected {dims:?}",
                    t.dims()
                )));
            }
            Ok(())
        };
        let p = &params;
        expect(&p.wq, &[c, c], "q")?;
        expect(&p.wk, &[c, c], "k")?;
        expect(&p.wv, &[c, c], "v")?;
        expect(&p.wo, &[c, c], "out")?;
        expect(&p.w1, &[shape.mlp_hidden, c], "fc1")?;
        expect(&p.w2, &[c, shape.mlp_hidden], "fc2")?;
        if p.ln1.is_some() != shape.layer_norm || p.ln2.is_some() != shape.layer_norm {
            return Err(Error::Config("layer norm presence disagrees with block shape".into()));
        }
        Ok(Self {
            params,
            shape,
            eps: 1e-5,
        })
    }

    fn norm(&self, x: &Tensor, ln: &Option<LayerNormParams>) -> Result<Tensor> {
        match ln {
            Some(p) => nn::layer_norm(x, &p.gamma, &p.beta, self.eps),
            None => Ok(x.clone()),
        }
    }

    /// `x` is `(batch, tokens, dim)`; `mask` is an optional additive
    /// `(tokens, tokens)` attention bias.
    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, l, c) = x.dims3()?;
        if c != self.shape.dim {
            return Err(Error::Config(format!("token width {c} != block width {}", self.shape.dim)));
        }
        if l == 0 {
            return Err(Error::Input("attention block needs at least one token".into()));
        }
        let p = &self.params;
        let heads = self.shape.heads;
        let dh = c / heads;
        let h = self.norm(x, &p.ln1)?;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, l, heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(nn::linear(&h, &p.wq, Some(&p.bq))?)?;
        let k = split(nn::linear(&h, &p.wk, Some(&p.bk))?)?;
        let v = split(nn::linear(&h, &p.wv, Some(&p.bv))?)?;
        let mut logits = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (dh as f64).sqrt()))?;
        if let Some(mask) = mask {
            logits = logits.broadcast_add(mask)?;
        }
        let attn = nn::softmax_last(&logits)?;
        let ctx = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, l, c))?;
        let x = (x + nn::linear(&ctx, &p.wo, Some(&p.bo))?)?;
        let h = self.norm(&x, &p.ln2)?;
        let m = self.shape.activation.apply(&nn::linear(&h, &p.w1, Some(&p.b1))?)?;
        Ok((&x + nn::linear(&m, &p.w2, Some(&p.b2))?)?)
    }

    /// Value projection of the (normalized) input, before attention mixing
    /// and the residual add.
    pub fn value_path(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm(x, &self.params.ln1)?;
        nn::linear(&h, &self.params.wv, Some(&self.params.bv))
    }
}

/// Additive causal mask: position i may attend to j ≤ i.
pub fn causal_mask(len: usize, dtype: DType) -> Result<Tensor> {
    let data: Vec<f64> = (0..len * len)
        .map(|idx| if idx % len > idx / len { f64::NEG_INFINITY } else { 0.0 })
        .collect();
    nn::from_f64(data, &[len, len], dtype)
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Loop-based reference for one block, independent of the tensor path.

    pub struct Dense {
        pub w: Vec<Vec<f64>>,
        pub b: Vec<f64>,
    }

    impl Dense {
        pub fn apply(&self, x: &[f64]) -> Vec<f64> {
            self.w
                .iter()
                .zip(&self.b)
                .map(|(row, b)| row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + b)
                .collect()
        }
    }

    pub struct BlockOracle {
        pub q: Dense,
        pub k: Dense,
        pub v: Dense,
        pub o: Dense,
        pub fc1: Dense,
        pub fc2: Dense,
        pub heads: usize,
        pub layer_norm: bool,
    }

    fn ln(x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        x.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect()
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    impl BlockOracle {
        pub fn forward(&self, tokens: &[Vec<f64>]) -> Vec<Vec<f64>> {
            let c = tokens[0].len();
            let dh = c / self.heads;
            let norm = |x: &Vec<f64>| if self.layer_norm { ln(x) } else { x.clone() };
            let h: Vec<Vec<f64>> = tokens.iter().map(norm).collect();
            let q: Vec<_> = h.iter().map(|t| self.q.apply(t)).collect();
            let k: Vec<_> = h.iter().map(|t| self.k.apply(t)).collect();
            let v: Vec<_> = h.iter().map(|t| self.v.apply(t)).collect();
            let mut ctx = vec![vec![0.0; c]; tokens.len()];
            for head in 0..self.heads {
                let r = head * dh..(head + 1) * dh;
                for i in 0..tokens.len() {
                    let scores: Vec<f64> = (0..tokens.len())
                        .map(|j| {
                            r.clone().map(|d| q[i][d] * k[j][d]).sum::<f64>() / (dh as f64).sqrt()
                        })
                        .collect();
                    let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for j in 0..tokens.len() {
                        for d in r.clone() {
                            ctx[i][d] += e[j] / z * v[j][d];
                        }
                    }
                }
            }
            tokens
                .iter()
                .zip(&ctx)
                .map(|(x, cx)| {
                    let a = self.o.apply(cx);
                    let x1: Vec<f64> = x.iter().zip(&a).map(|(x, a)| x + a).collect();
                    let hidden: Vec<f64> = self.fc1.apply(&norm(&x1)).into_iter().map(gelu).collect();
                    let m = self.fc2.apply(&hidden);
                    x1.iter().zip(&m).map(|(x, m)| x + m).collect()
                })
                .collect()
        }
    }
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(layer_norm: bool) -> BlockShape {
        BlockShape {
            dim: 4,
            heads: 2,
            mlp_hidden: 8,
            layer_norm,
            activation: Activation::Gelu,
        }
    }

    fn random_block(seed: u64, layer_norm: bool) -> ResidualAttentionBlock {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = shape(layer_norm);
        ResidualAttentionBlock::new(BlockParams::random(&s, 1.0, DType::F64, &mut rng).unwrap(), s)
            .unwrap()
    }

    #[test]
    fn zero_weights_give_identity() {
        let s = shape(true);
        let block = ResidualAttentionBlock::new(BlockParams::zeros(&s, DType::F64).unwrap(), s).unwrap();
        let x = tokens_tensor(&[vec![0.3, -1.0, 2.0, 0.5], vec![1.5, 0.0, -0.2, 0.1]]);
        let y = block.forward(&x, None).unwrap();
        assert_eq!(y.to_vec3::<f64>().unwrap(), x.to_vec3::<f64>().unwrap());
    }

    #[test]
    fn deterministic_for_fixed_params() {
        let block = random_block(3, true);
        let x = tokens_tensor(&[vec![0.3, -1.0, 2.0, 0.5], vec![1.5, 0.0, -0.2, 0.1]]);
        let a = block.forward(&x, None).unwrap().to_vec3::<f64>().unwrap();
        let b = block.forward(&x, None).unwrap().to_vec3::<f64>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn matches_loop_oracle_on_two_tokens() {
        for (seed, layer_norm) in [(7, true), (8, false)] {
            let block = random_block(seed, layer_norm);
            let tokens = vec![vec![0.3, -1.0, 2.0, 0.5], vec![1.5, 0.0, -0.2, 0.1]];
            let got = block.forward(&tokens_tensor(&tokens), None).unwrap().to_vec3::<f64>().unwrap();
            let want = oracle_of(&block).forward(&tokens);
            for (g, w) in got[0].iter().flatten().zip(want.iter().flatten()) {
                assert!((g - w).abs() < 1e-10, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn value_path_scales_linearly_without_layer_norm() {
        let block = random_block(11, false);
        let x = tokens_tensor(&[vec![0.3, -1.0, 2.0, 0.5], vec![1.5, 0.0, -0.2, 0.1]]);
        let c = 2.5;
        let v = block.value_path(&x).unwrap();
        let vc = block.value_path(&(&x * c).unwrap()).unwrap();
        let scaled = (v * c).unwrap().to_vec3::<f64>().unwrap();
        let direct = vc.to_vec3::<f64>().unwrap();
        for (a, b) in scaled[0].iter().flatten().zip(direct[0].iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
        // Hand oracle: the value path is xWᵥᵀ (zero bias).
        let o = oracle_of(&block);
        let tokens = vec![vec![0.3 * c, -1.0 * c, 2.0 * c, 0.5 * c], vec![1.5 * c, 0.0, -0.2 * c, 0.1 * c]];
        for (row, tok) in direct[0].iter().zip(&tokens) {
            for (a, b) in row.iter().zip(o.v.apply(tok)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_width_mismatch() {
        let block = random_block(1, true);
        let x = Tensor::zeros((1, 2, 5), DType::F64, &crate::nn::CPU).unwrap();
        assert!(matches!(block.forward(&x, None), Err(Error::Config(_))));
        let s = shape(true);
        let mut p = BlockParams::zeros(&s, DType::F64).unwrap();
        p.wq = Tensor::zeros((3, 4), DType::F64, &crate::nn::CPU).unwrap();
        assert!(matches!(ResidualAttentionBlock::new(p, s), Err(Error::Config(_))));
    }

    #[test]
    fn causal_mask_blocks_future_tokens() {
        let m = causal_mask(3, DType::F64).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(m[0][0], 0.0);
        assert!(m[0][1].is_infinite());
        assert_eq!(m[2][1], 0.0);
    }
}
