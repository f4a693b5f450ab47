//! Brute-force metric oracles, finite differences and fixtures shared by the
//! integration tests.
#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use normdistill::config::Precision;
use normdistill::data::SynthSpec;
use normdistill::RunConfig;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Pairwise AUROC: every positive against every negative, ties worth ½.
pub fn auroc_pairwise(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

fn distinct_descending(scores: &[f64]) -> Vec<f64> {
    let mut t = scores.to_vec();
    t.sort_by(|a, b| b.total_cmp(a));
    t.dedup();
    t
}

/// AP by enumerating every distinct threshold and recounting from scratch.
pub fn ap_enumerate(scores: &[f64], labels: &[bool]) -> f64 {
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for t in distinct_descending(scores) {
        let (mut tp, mut fp) = (0.0, 0.0);
        for (s, &l) in scores.iter().zip(labels) {
            if *s >= t {
                if l {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        let recall = tp / positives;
        ap += (recall - prev_recall) * tp / (tp + fp);
        prev_recall = recall;
    }
    ap
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, i: usize) -> usize {
        if self.0[i] != i {
            let root = self.find(self.0[i]);
            self.0[i] = root;
        }
        self.0[i]
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Region id per pixel (`None` for normal), 4-connectivity, via union-find.
pub fn regions_union_find(mask: &[u8], h: usize, w: usize) -> Vec<Option<usize>> {
    let mut uf = UnionFind((0..h * w).collect());
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if mask[i] == 0 {
                continue;
            }
            if x + 1 < w && mask[i + 1] != 0 {
                uf.union(i, i + 1);
            }
            if y + 1 < h && mask[i + w] != 0 {
                uf.union(i, i + w);
            }
        }
    }
    (0..h * w).map(|i| (mask[i] != 0).then(|| uf.find(i))).collect()
}

/// One map of an AUPRO instance: `(height, width, scores, mask)`.
pub type OracleMap = (usize, usize, Vec<f64>, Vec<u8>);

/// AUPRO from scratch: at every distinct threshold, recount the FPR over all
/// normal pixels and the mean per-region overlap; then integrate the curve up
/// to `limit` with the trapezoid rule and normalize by `limit`.
pub fn aupro_brute(maps: &[OracleMap], limit: f64) -> f64 {
    let mut regions: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut all_scores = Vec::new();
    for (m, (h, w, scores, mask)) in maps.iter().enumerate() {
        let ids = regions_union_find(mask, *h, *w);
        let mut roots: Vec<usize> = ids.iter().flatten().copied().collect();
        roots.sort();
        roots.dedup();
        for r in roots {
            let pixels = ids.iter().enumerate().filter(|(_, id)| **id == Some(r)).map(|(i, _)| i).collect();
            regions.push((m, pixels));
        }
        all_scores.extend_from_slice(scores);
    }
    let negatives: usize = maps.iter().map(|(_, _, _, mask)| mask.iter().filter(|&&v| v == 0).count()).sum();
    let mut curve = vec![(0.0, 0.0)];
    for t in distinct_descending(&all_scores) {
        let fp: usize = maps
            .iter()
            .map(|(_, _, s, mask)| s.iter().zip(mask).filter(|(s, m)| **s >= t && **m == 0).count())
            .sum();
        let pro: f64 = regions
            .iter()
            .map(|(m, px)| px.iter().filter(|&&i| maps[*m].2[i] >= t).count() as f64 / px.len() as f64)
            .sum::<f64>()
            / regions.len() as f64;
        curve.push((fp as f64 / negatives as f64, pro));
    }
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        if x1 > limit {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
            break;
        }
        area += (x1 - x0) * (y0 + y1) / 2.0;
    }
    area / limit
}

/// Scores drawn from a small grid so that ties are common.
pub fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(2..=64);
    let levels = rng.random_range(2..=12);
    let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
    labels[0] = true;
    labels[1] = false;
    let scores = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
    (scores, labels)
}

pub fn random_maps(rng: &mut ChaCha8Rng) -> Vec<OracleMap> {
    let images = rng.random_range(1..=3);
    let mut maps: Vec<OracleMap> = (0..images)
        .map(|_| {
            let h = rng.random_range(2..=8);
            let w = rng.random_range(2..=8);
            let mut mask = vec![0u8; h * w];
            for _ in 0..rng.random_range(0..=3) {
                let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
                let (dh, dw) = (rng.random_range(1..=3), rng.random_range(1..=3));
                for y in y0..(y0 + dh).min(h) {
                    for x in x0..(x0 + dw).min(w) {
                        mask[y * w + x] = 1;
                    }
                }
            }
            let scores = (0..h * w).map(|i| rng.random_range(0..10) as f64 / 10.0 + 0.3 * mask[i] as f64).collect();
            (h, w, scores, mask)
        })
        .collect();
    let (h, w, _, mask) = &mut maps[0];
    mask[0] = 1;
    mask[*h * *w - 1] = 0;
    maps
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, 1e-12)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-12)
}

/// Three 64×64 texture categories, 64 training and 24 test images each.
pub fn desk_spec() -> SynthSpec {
    SynthSpec {
        num_categories: 3,
        train_per_category: 64,
        test_good_per_category: 12,
        test_defect_per_category: 12,
        resolution: 64,
        seed: 0,
        ..SynthSpec::default()
    }
}

/// Toy six-block encoder with C = 64, T = 5, K = 2, 30 epochs.
pub fn desk_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.encoder.resolution = 64;
    cfg.encoder.patch_size = 8;
    cfg.encoder.depth = 6;
    cfg.encoder.embed_dim = 64;
    cfg.encoder.num_heads = 4;
    cfg.moe.num_experts = 5;
    cfg.moe.top_k = 2;
    cfg.train.epochs = 30;
    cfg.train.seed = seed;
    cfg.train.checkpoint_every = 0;
    cfg
}

/// A config small enough for multi-epoch runs in a few seconds.
pub fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.encoder.resolution = 32;
    cfg.encoder.patch_size = 8;
    cfg.encoder.depth = 3;
    cfg.encoder.embed_dim = 16;
    cfg.encoder.num_heads = 2;
    cfg.text.prompt_len = 4;
    cfg.text.d_text = 16;
    cfg.model.decoder_heads = 2;
    cfg.model.precision = Precision::F32;
    cfg.constraint.theta = 1;
    cfg.moe.num_experts = 3;
    cfg.moe.top_k = 2;
    cfg.train.epochs = 3;
    cfg.train.batch_size = 4;
    cfg.train.checkpoint_every = 0;
    cfg.eval.batch_size = 8;
    cfg
}

pub fn small_spec() -> SynthSpec {
    SynthSpec {
        num_categories: 2,
        train_per_category: 8,
        test_good_per_category: 3,
        test_defect_per_category: 3,
        resolution: 32,
        seed: 7,
        ..SynthSpec::default()
    }
}

pub fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_normdistill"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}
