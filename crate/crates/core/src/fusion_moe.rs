//! Multi-layer fusion projection and the gated mixture of experts.
//!
//! Expert indices are 0-based throughout.

use candle_core::{DType, Tensor, D};
use rand::Rng;

use crate::encoders::PatchFeatureMap;
use crate::error::{Error, Result};
use crate::nn::{self, Activation};
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct FusedFeature {
    /// `(batch, H·W, C)`
    pub patches: Tensor,
    pub grid: (usize, usize),
}

/// Linear `k·C → C` map with dropout, applied to channel-concatenated layers.
#[derive(Debug, Clone)]
pub struct Projection {
    /// `(C, k·C)`
    pub weight: Tensor,
    pub bias: Tensor,
    pub dropout: f64,
}

impl Projection {
    pub fn init<R: Rng>(inputs: usize, dim: usize, dropout: f64, dtype: DType, rng: &mut R) -> Result<Self> {
        let fan_in = inputs * dim;
        Ok(Self {
            weight: nn::randn(&[dim, fan_in], 1.0 / (fan_in as f64).sqrt(), dtype, rng)?,
            bias: nn::zeros(&[dim], dtype)?,
            dropout,
        })
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<Self> {
        Ok(Self {
            weight: store.insert("fusion.weight", &self.weight)?,
            bias: store.insert("fusion.bias", &self.bias)?,
            dropout: self.dropout,
        })
    }

    pub fn from_store(store: &ParamStore, dropout: f64) -> Result<Self> {
        Ok(Self {
            weight: store.get("fusion.weight")?,
            bias: store.get("fusion.bias")?,
            dropout,
        })
    }
}

/// Concatenates the layer grids along channels and projects back to C.
/// Dropout is active only when `training`.
pub fn fuse<R: Rng>(
    features: &[&PatchFeatureMap],
    projection: &Projection,
    training: bool,
    rng: &mut R,
) -> Result<FusedFeature> {
    let first = features.first().ok_or_else(|| Error::Config("fusion needs at least one layer".into()))?;
    for f in features {
        if f.patches.dims() != first.patches.dims() {
            return Err(Error::Config(format!(
                "fusion inputs differ in shape: {:?} vs {:?}",
                f.patches.dims(),
                first.patches.dims()
            )));
        }
    }
    let expected = features.len() * first.dim();
    if projection.weight.dims()[1] != expected {
        return Err(Error::Config(format!(
            "projection expects {} input channels, got {expected}",
            projection.weight.dims()[1]
        )));
    }
    let parts: Vec<&Tensor> = features.iter().map(|f| &f.patches).collect();
    let cat = Tensor::cat(&parts, D::Minus1)?;
    let mut out = nn::linear(&cat, &projection.weight, Some(&projection.bias))?;
    if training {
        out = nn::dropout(&out, projection.dropout, rng)?;
    }
    Ok(FusedFeature {
        patches: out,
        grid: first.grid,
    })
}

#[derive(Debug, Clone)]
pub struct Router {
    /// `(T, C)`
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Per-patch routing decision.
#[derive(Debug, Clone)]
pub struct GateAssignment {
    /// `(R, T)` softmax scores over experts.
    pub scores: Tensor,
    /// For each patch, the K selected experts in descending score order.
    pub topk_indices: Vec<Vec<usize>>,
    /// `(R, K)` selected scores renormalized to sum to one.
    pub topk_weights: Tensor,
}

impl GateAssignment {
    pub fn num_experts(&self) -> usize {
        self.scores.dims()[1]
    }
}

/// Top-K over each score row (ties go to the lower expert index) with the
/// selected scores renormalized.
pub fn gate_from_scores(scores: Tensor, k: usize) -> Result<GateAssignment> {
    let (rows, t) = scores.dims2()?;
    if k == 0 || k > t {
        return Err(Error::Config(format!("top-K of {k} needs 1 ≤ K ≤ T = {t}")));
    }
    let values = nn::to_f64_vec(&scores)?;
    let mut topk_indices = Vec::with_capacity(rows);
    let mut flat = Vec::with_capacity(rows * k);
    for r in 0..rows {
        let row = &values[r * t..(r + 1) * t];
        let mut order: Vec<usize> = (0..t).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        order.truncate(k);
        flat.extend(order.iter().map(|&i| i as u32));
        topk_indices.push(order);
    }
    let idx = Tensor::from_vec(flat, (rows, k), scores.device())?;
    let picked = scores.gather(&idx, 1)?;
    let topk_weights = picked.broadcast_div(&picked.sum_keepdim(1)?)?;
    Ok(GateAssignment {
        scores,
        topk_indices,
        topk_weights,
    })
}

/// Routes a batch of patch vectors `(R, C)`.
pub fn route_batch(z: &Tensor, router: &Router, k: usize) -> Result<GateAssignment> {
    let (_, c) = z.dims2()?;
    if router.weight.dims()[1] != c {
        return Err(Error::Config(format!(
            "router expects width {}, got {c}",
            router.weight.dims()[1]
        )));
    }
    let logits = nn::linear(z, &router.weight, Some(&router.bias))?;
    gate_from_scores(nn::softmax_last(&logits)?, k)
}

/// Routes a single `(C,)` patch vector.
pub fn route(patch: &Tensor, router: &Router, k: usize) -> Result<GateAssignment> {
    route_batch(&patch.unsqueeze(0)?, router, k)
}

/// Two-layer MLP `C → hidden → C`.
#[derive(Debug, Clone)]
pub struct Expert {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub activation: Activation,
}

impl Expert {
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let h = self.activation.apply(&nn::linear(z, &self.w1, Some(&self.b1))?)?;
        nn::linear(&h, &self.w2, Some(&self.b2))
    }
}

/// `z*_r = Σ_k w_rk · E_k(z_r)`; each expert only sees the patches routed to it.
pub fn moe_apply(z: &Tensor, assignment: &GateAssignment, experts: &[Expert]) -> Result<Tensor> {
    let (rows, _) = z.dims2()?;
    if assignment.topk_indices.len() != rows {
        return Err(Error::Input("assignment and patch count differ".into()));
    }
    if experts.len() != assignment.num_experts() {
        return Err(Error::Config(format!(
            "{} experts for {} router outputs",
            experts.len(),
            assignment.num_experts()
        )));
    }
    let k = assignment.topk_weights.dims()[1];
    let weights = assignment.topk_weights.flatten_all()?;
    let mut out = z.zeros_like()?;
    for (t, expert) in experts.iter().enumerate() {
        let mut rows_t = Vec::new();
        let mut slots = Vec::new();
        for (r, sel) in assignment.topk_indices.iter().enumerate() {
            if let Some(pos) = sel.iter().position(|&e| e == t) {
                rows_t.push(r as u32);
                slots.push((r * k + pos) as u32);
            }
        }
        if rows_t.is_empty() {
            continue;
        }
        let n = rows_t.len();
        let rows_t = Tensor::from_vec(rows_t, n, z.device())?;
        let slots = Tensor::from_vec(slots, n, z.device())?;
        let y = expert.forward(&z.index_select(&rows_t, 0)?)?;
        let w = weights.index_select(&slots, 0)?.unsqueeze(1)?;
        out = out.index_add(&rows_t, &y.broadcast_mul(&w)?, 0)?;
    }
    Ok(out)
}

/// Squared coefficient of variation of the per-expert importance
/// `I_t = Σ_r scores[r, t]`, using the population standard deviation.
pub fn importance_loss(scores: &Tensor, epsilon: f64) -> Result<Tensor> {
    let (rows, _) = scores.dims2()?;
    if rows == 0 {
        return Err(Error::Input("importance loss over zero patches".into()));
    }
    let importance = scores.sum(0)?;
    let mean = importance.mean_all()?;
    let var = importance.broadcast_sub(&mean)?.sqr()?.mean_all()?;
    Ok(var.div(&(mean.sqr()? + epsilon)?)?)
}

#[derive(Debug, Clone)]
pub struct MixtureOfExperts {
    pub router: Router,
    pub experts: Vec<Expert>,
    pub top_k: usize,
}

impl MixtureOfExperts {
    pub fn init<R: Rng>(
        dim: usize,
        hidden: usize,
        num_experts: usize,
        top_k: usize,
        dtype: DType,
        rng: &mut R,
    ) -> Result<Self> {
        if top_k == 0 || top_k > num_experts {
            return Err(Error::Config(format!("need 1 ≤ K ≤ T, got K={top_k} T={num_experts}")));
        }
        let router = Router {
            weight: nn::randn(&[num_experts, dim], 1.0 / (dim as f64).sqrt(), dtype, rng)?,
            bias: nn::zeros(&[num_experts], dtype)?,
        };
        let experts = (0..num_experts)
            .map(|_| {
                Ok(Expert {
                    w1: nn::randn(&[hidden, dim], 1.0 / (dim as f64).sqrt(), dtype, rng)?,
                    b1: nn::zeros(&[hidden], dtype)?,
                    w2: nn::randn(&[dim, hidden], 1.0 / (hidden as f64).sqrt(), dtype, rng)?,
                    b2: nn::zeros(&[dim], dtype)?,
                    activation: Activation::Gelu,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            router,
            experts,
            top_k,
        })
    }

    pub fn register(&self, store: &mut ParamStore) -> Result<Self> {
        let router = Router {
            weight: store.insert("moe.router.weight", &self.router.weight)?,
            bias: store.insert("moe.router.bias", &self.router.bias)?,
        };
        let experts = self
            .experts
            .iter()
            .enumerate()
            .map(|(t, e)| {
                Ok(Expert {
                    w1: store.insert(format!("moe.expert.{t}.fc1.weight"), &e.w1)?,
                    b1: store.insert(format!("moe.expert.{t}.fc1.bias"), &e.b1)?,
                    w2: store.insert(format!("moe.expert.{t}.fc2.weight"), &e.w2)?,
                    b2: store.insert(format!("moe.expert.{t}.fc2.bias"), &e.b2)?,
                    activation: e.activation,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            router,
            experts,
            top_k: self.top_k,
        })
    }

    pub fn from_store(store: &ParamStore, num_experts: usize, top_k: usize) -> Result<Self> {
        let router = Router {
            weight: store.get("moe.router.weight")?,
            bias: store.get("moe.router.bias")?,
        };
        if router.weight.dims()[0] != num_experts {
            return Err(Error::Compatibility(format!(
                "stored router has {} experts, config asks for {num_experts}",
                router.weight.dims()[0]
            )));
        }
        let experts = (0..num_experts)
            .map(|t| {
                Ok(Expert {
                    w1: store.get(&format!("moe.expert.{t}.fc1.weight"))?,
                    b1: store.get(&format!("moe.expert.{t}.fc1.bias"))?,
                    w2: store.get(&format!("moe.expert.{t}.fc2.weight"))?,
                    b2: store.get(&format!("moe.expert.{t}.fc2.bias"))?,
                    activation: Activation::Gelu,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            router,
            experts,
            top_k,
        })
    }

    /// Routes every patch of `x` `(batch, L, C)` and mixes its experts.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, GateAssignment)> {
        let (b, l, c) = x.dims3()?;
        let z = x.reshape((b * l, c))?;
        let assignment = route_batch(&z, &self.router, self.top_k)?;
        let out = moe_apply(&z, &assignment, &self.experts)?;
        Ok((out.reshape((b, l, c))?, assignment))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{scalar_f64, to_f64_vec, CPU};
    use crate::testutil::{assert_grad_close, central_difference, rand_vec};
    use candle_core::Var;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn map(data: Vec<f64>, b: usize, l: usize, c: usize) -> PatchFeatureMap {
        PatchFeatureMap::new(
            Tensor::from_vec(data, (b, l, c), &CPU).unwrap(),
            Tensor::zeros((b, c), DType::F64, &CPU).unwrap(),
            (1, l),
            1,
        )
        .unwrap()
    }

    #[test]
    fn selector_projection_returns_first_layer() {
        let c = 3;
        let f: Vec<PatchFeatureMap> = (0..3).map(|i| map(rand_vec(2 * 4 * c, i), 2, 4, c)).collect();
        let mut w = vec![0.0; c * 3 * c];
        for i in 0..c {
            w[i * 3 * c + i] = 1.0;
        }
        let proj = Projection {
            weight: Tensor::from_vec(w, (c, 3 * c), &CPU).unwrap(),
            bias: Tensor::zeros(c, DType::F64, &CPU).unwrap(),
            dropout: 0.5,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = fuse(&[&f[0], &f[1], &f[2]], &proj, false, &mut rng).unwrap();
        assert_eq!(to_f64_vec(&out.patches).unwrap(), to_f64_vec(&f[0].patches).unwrap());
        let again = fuse(&[&f[0], &f[1], &f[2]], &proj, false, &mut rng).unwrap();
        assert_eq!(to_f64_vec(&out.patches).unwrap(), to_f64_vec(&again.patches).unwrap());
    }

    #[test]
    fn fusion_matches_hand_matmul() {
        let f: Vec<Vec<f64>> = (0..3).map(|i| rand_vec(2, 10 + i)).collect();
        let maps: Vec<PatchFeatureMap> = f.iter().map(|v| map(v.clone(), 1, 1, 2)).collect();
        let w = rand_vec(12, 20);
        let b = rand_vec(2, 21);
        let proj = Projection {
            weight: Tensor::from_vec(w.clone(), (2, 6), &CPU).unwrap(),
            bias: Tensor::from_vec(b.clone(), 2, &CPU).unwrap(),
            dropout: 0.1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let got = to_f64_vec(&fuse(&[&maps[0], &maps[1], &maps[2]], &proj, false, &mut rng).unwrap().patches).unwrap();
        let x: Vec<f64> = f.concat();
        for o in 0..2 {
            let want: f64 = (0..6).map(|j| w[o * 6 + j] * x[j]).sum::<f64>() + b[o];
            assert!((got[o] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_rejects_mismatched_layers() {
        let a = map(rand_vec(8, 1), 1, 4, 2);
        let b = map(rand_vec(6, 2), 1, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let proj = Projection::init(2, 2, 0.0, DType::F64, &mut rng).unwrap();
        assert!(matches!(fuse(&[&a, &b], &proj, false, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn top_two_of_five_renormalized() {
        let scores = Tensor::new(&[[0.10f64, 0.40, 0.05, 0.30, 0.15]], &CPU).unwrap();
        let g = gate_from_scores(scores, 2).unwrap();
        assert_eq!(g.topk_indices, vec![vec![1, 3]]);
        let w = to_f64_vec(&g.topk_weights).unwrap();
        assert!((w[0] - 4.0 / 7.0).abs() < 1e-12 && (w[1] - 3.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn full_k_keeps_the_softmax() {
        let router = Router {
            weight: Tensor::from_vec(rand_vec(12, 3), (4, 3), &CPU).unwrap(),
            bias: Tensor::zeros(4, DType::F64, &CPU).unwrap(),
        };
        let z = Tensor::new(&[0.3f64, -0.2, 0.9], &CPU).unwrap();
        let g = route(&z, &router, 4).unwrap();
        let mut by_expert = vec![0.0; 4];
        for (slot, &e) in g.topk_indices[0].iter().enumerate() {
            by_expert[e] = to_f64_vec(&g.topk_weights).unwrap()[slot];
        }
        for (a, b) in by_expert.iter().zip(to_f64_vec(&g.scores).unwrap()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ties_go_to_the_lower_index() {
        let scores = Tensor::new(&[[0.3f64, 0.2, 0.3, 0.2]], &CPU).unwrap();
        assert_eq!(gate_from_scores(scores.clone(), 1).unwrap().topk_indices, vec![vec![0]]);
        assert_eq!(gate_from_scores(scores, 3).unwrap().topk_indices, vec![vec![0, 2, 1]]);
    }

    #[test]
    fn k_above_t_is_a_configuration_error() {
        let scores = Tensor::new(&[[0.5f64, 0.5]], &CPU).unwrap();
        assert!(matches!(gate_from_scores(scores, 3), Err(Error::Config(_))));
    }

    fn identity_expert(c: usize) -> Expert {
        // relu-free identity is impossible with GELU, so use w2·gelu(w1 z) with
        // a linear trick: gelu(a) − gelu(−a) = a.
        let mut w1 = vec![0.0; 2 * c * c];
        let mut w2 = vec![0.0; c * 2 * c];
        for i in 0..c {
            w1[i * c + i] = 1.0;
            w1[(c + i) * c + i] = -1.0;
            w2[i * 2 * c + i] = 1.0;
            w2[i * 2 * c + c + i] = -1.0;
        }
        Expert {
            w1: Tensor::from_vec(w1, (2 * c, c), &CPU).unwrap(),
            b1: Tensor::zeros(2 * c, DType::F64, &CPU).unwrap(),
            w2: Tensor::from_vec(w2, (c, 2 * c), &CPU).unwrap(),
            b2: Tensor::zeros(c, DType::F64, &CPU).unwrap(),
            activation: Activation::Gelu,
        }
    }

    #[test]
    fn identity_experts_reproduce_the_input() {
        let c = 3;
        let experts: Vec<Expert> = (0..4).map(|_| identity_expert(c)).collect();
        let z = Tensor::from_vec(rand_vec(5 * c, 4), (5, c), &CPU).unwrap();
        let router = Router {
            weight: Tensor::from_vec(rand_vec(4 * c, 5), (4, c), &CPU).unwrap(),
            bias: Tensor::zeros(4, DType::F64, &CPU).unwrap(),
        };
        let g = route_batch(&z, &router, 2).unwrap();
        let out = moe_apply(&z, &g, &experts).unwrap();
        for (a, b) in to_f64_vec(&out).unwrap().iter().zip(to_f64_vec(&z).unwrap()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_expert_routing_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let moe = MixtureOfExperts::init(3, 4, 3, 1, DType::F64, &mut rng).unwrap();
        let z = Tensor::from_vec(rand_vec(6, 10), (2, 3), &CPU).unwrap();
        let g = route_batch(&z, &moe.router, 1).unwrap();
        let out = moe_apply(&z, &g, &moe.experts).unwrap();
        for r in 0..2 {
            let e = g.topk_indices[r][0];
            let want = moe.experts[e].forward(&z.narrow(0, r, 1).unwrap()).unwrap();
            assert_eq!(
                to_f64_vec(&out.narrow(0, r, 1).unwrap()).unwrap(),
                to_f64_vec(&want).unwrap()
            );
        }
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    #[test]
    fn mixture_matches_loop_oracle() {
        let (c, h) = (3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let moe = MixtureOfExperts::init(c, h, 4, 2, DType::F64, &mut rng).unwrap();
        let zv = rand_vec(6 * c, 30);
        let z = Tensor::from_vec(zv.clone(), (6, c), &CPU).unwrap();
        let g = route_batch(&z, &moe.router, 2).unwrap();
        let got = to_f64_vec(&moe_apply(&z, &g, &moe.experts).unwrap()).unwrap();
        let rw = to_f64_vec(&moe.router.weight).unwrap();
        for r in 0..6 {
            let x = &zv[r * c..(r + 1) * c];
            let logits: Vec<f64> = (0..4).map(|t| (0..c).map(|j| rw[t * c + j] * x[j]).sum()).collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            let p: Vec<f64> = e.iter().map(|v| v / s).collect();
            let mut order: Vec<usize> = (0..4).collect();
            order.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
            let norm = p[order[0]] + p[order[1]];
            let mut want = vec![0.0; c];
            for &t in &order[..2] {
                let ex = &moe.experts[t];
                let w1 = to_f64_vec(&ex.w1).unwrap();
                let w2 = to_f64_vec(&ex.w2).unwrap();
                let hid: Vec<f64> = (0..h).map(|i| gelu((0..c).map(|j| w1[i * c + j] * x[j]).sum())).collect();
                for o in 0..c {
                    want[o] += p[t] / norm * (0..h).map(|i| w2[o * h + i] * hid[i]).sum::<f64>();
                }
            }
            for o in 0..c {
                assert!((got[r * c + o] - want[o]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn importance_loss_reference_values() {
        let uniform = Tensor::full(0.2f64, (7, 5), &CPU).unwrap();
        assert!(scalar_f64(&importance_loss(&uniform, 1e-10).unwrap()).unwrap().abs() < 1e-12);
        let mut collapsed = vec![0.0; 8 * 5];
        for r in 0..8 {
            collapsed[r * 5] = 1.0;
        }
        let collapsed = Tensor::from_vec(collapsed, (8, 5), &CPU).unwrap();
        assert!((scalar_f64(&importance_loss(&collapsed, 1e-10).unwrap()).unwrap() - 4.0).abs() < 1e-6);
    }

    #[test]
    fn importance_loss_is_scale_and_permutation_invariant() {
        let s = rand_vec(6 * 4, 3).iter().map(|v| v.abs()).collect::<Vec<_>>();
        let base = Tensor::from_vec(s.clone(), (6, 4), &CPU).unwrap();
        let l = scalar_f64(&importance_loss(&base, 1e-10).unwrap()).unwrap();
        let scaled = scalar_f64(&importance_loss(&(&base * 3.7).unwrap(), 1e-10).unwrap()).unwrap();
        assert!((l - scaled).abs() < 1e-9);
        let mut rows: Vec<&[f64]> = s.chunks(4).collect();
        rows.reverse();
        rows.swap(0, 3);
        let permuted = Tensor::from_vec(rows.concat(), (6, 4), &CPU).unwrap();
        assert!((l - scalar_f64(&importance_loss(&permuted, 1e-10).unwrap()).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn importance_gradient_matches_finite_differences() {
        let raw: Vec<f64> = rand_vec(4 * 8, 12).iter().map(|v| v.abs() + 0.05).collect();
        let var = Var::from_tensor(&Tensor::from_vec(raw.clone(), (4, 8), &CPU).unwrap()).unwrap();
        let grads = importance_loss(var.as_tensor(), 1e-10).unwrap().backward().unwrap();
        let analytic = to_f64_vec(grads.get(var.as_tensor()).unwrap()).unwrap();
        let numeric = central_difference(&raw, 1e-4, |x| {
            scalar_f64(&importance_loss(&Tensor::from_vec(x.to_vec(), (4, 8), &CPU).unwrap(), 1e-10).unwrap()).unwrap()
        });
        assert_grad_close(&analytic, &numeric, 1e-3);
    }

    #[test]
    fn one_step_on_importance_loss_rebalances_a_skewed_router() {
        let (c, t) = (4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut bias = vec![0.0; t];
        bias[0] = 3.0;
        let w = Var::from_tensor(&nn::randn(&[t, c], 0.5, DType::F64, &mut rng).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::from_vec(bias, t, &CPU).unwrap()).unwrap();
        let z = nn::randn(&[32, c], 1.0, DType::F64, &mut rng).unwrap();
        let loss_at = |w: &Tensor, b: &Tensor| {
            let router = Router { weight: w.clone(), bias: b.clone() };
            importance_loss(&route_batch(&z, &router, 2).unwrap().scores, 1e-10).unwrap()
        };
        let before = loss_at(w.as_tensor(), b.as_tensor());
        let grads = before.backward().unwrap();
        let lr = 0.05;
        let w2 = (w.as_tensor() - (grads.get(w.as_tensor()).unwrap() * lr).unwrap()).unwrap();
        let b2 = (b.as_tensor() - (grads.get(b.as_tensor()).unwrap() * lr).unwrap()).unwrap();
        let after = scalar_f64(&loss_at(&w2, &b2)).unwrap();
        assert!(after < scalar_f64(&before).unwrap());
    }

    #[test]
    fn unselected_experts_receive_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let moe = MixtureOfExperts::init(3, 4, 5, 1, DType::F64, &mut rng).unwrap().register(&mut store).unwrap();
        let z = nn::randn(&[1, 1, 3], 1.0, DType::F64, &mut rng).unwrap();
        let (out, g) = moe.forward(&z).unwrap();
        let grads = out.sum_all().unwrap().backward().unwrap();
        let chosen = g.topk_indices[0][0];
        for (t, e) in moe.experts.iter().enumerate() {
            assert_eq!(grads.get(&e.w1).is_some(), t == chosen, "expert {t}");
        }
        assert!(grads.get(&moe.router.weight).is_some());
    }
}
