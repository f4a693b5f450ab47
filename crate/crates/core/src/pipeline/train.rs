use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::save_checkpoint;
use super::model::{total_loss, ModelState};
use crate::encoders::{Backends, PatchFeatureMap};
use crate::error::{Error, Result, StageExt};
use crate::nn::CPU;
use crate::sample::ImageSample;

pub const LOG_FILE: &str = "train_log.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const FINAL_CHECKPOINT: &str = "model.ndck";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.ndck";

/// Epoch means of the per-batch loss terms.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub distill: f64,
    pub c1: f64,
    pub c2: Option<f64>,
    pub constraint: f64,
    pub moe: f64,
    pub total: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,distill,c1,c2,constraint,moe,total";

    pub fn csv_row(&self) -> String {
        let c2 = self.c2.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.distill, self.c1, c2, self.constraint, self.moe, self.total
        )
    }
}

pub fn log_csv(records: &[EpochRecord]) -> String {
    let mut s = String::from(EpochRecord::CSV_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Encodes `samples` in chunks of `batch` and concatenates the tapped layers.
pub fn encode_all(backends: &Backends, samples: &[ImageSample], batch: usize) -> Result<[PatchFeatureMap; 3]> {
    if samples.is_empty() {
        return Err(Error::Input("no samples to encode".into()));
    }
    let mut chunks: Vec<[PatchFeatureMap; 3]> = Vec::new();
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&ImageSample> = chunk.iter().collect();
        chunks.push(backends.encode(&refs)?);
    }
    let mut out = Vec::with_capacity(3);
    for layer in 0..3 {
        let parts: Vec<&PatchFeatureMap> = chunks.iter().map(|c| &c[layer]).collect();
        out.push(PatchFeatureMap::cat(&parts)?);
    }
    Ok(out.try_into().expect("three layers"))
}

/// Seeded RNG for one epoch; independent of how many draws earlier epochs made.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub struct FitOutcome {
    pub state: ModelState,
    pub log: Vec<EpochRecord>,
}

/// Trains from `state.epoch` up to `config.train.epochs` on the pooled
/// normal-only `samples`. With `out_dir`, writes the effective config, the
/// loss log, wall-clock timings and checkpoints there.
pub fn fit(mut state: ModelState, backends: &Backends, samples: &[ImageSample], out_dir: Option<&Path>) -> Result<FitOutcome> {
    if let Some(bad) = samples.iter().find(|s| s.is_anomalous) {
        return Err(Error::DatasetIntegrity(format!("training sample {} is anomalous", bad.name)));
    }
    let cfg = state.config.clone();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        cfg.save(&dir.join("config.toml"))?;
    }
    let features = encode_all(backends, samples, cfg.eval.batch_size).stage("encode")?;
    let n = samples.len();
    let mut log = Vec::new();
    let mut timing = String::from("epoch,seconds\n");

    for epoch in state.epoch..cfg.train.epochs {
        let started = Instant::now();
        let snapshot = state.clone_deep()?;
        let mut rng = epoch_rng(state.seed, epoch);
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.shuffle(&mut rng);

        let mut sums = [0.0f64; 6];
        let mut c2_seen = false;
        let mut batches = 0usize;
        let result: Result<()> = (|| {
            let model = state.model(backends)?;
            for chunk in order.chunks(cfg.train.batch_size) {
                let rows = Tensor::new(chunk, &CPU)?;
                let batch: Vec<PatchFeatureMap> =
                    features.iter().map(|f| f.select(&rows)).collect::<Result<_>>()?;
                let batch: [PatchFeatureMap; 3] = batch.try_into().expect("three layers");
                let out = model.forward_features(&batch, true, &mut rng)?;
                let loss = total_loss(&out, epoch, &cfg)?;
                let grads = loss.total.backward()?;
                state.optimizer.step(&state.params, &grads)?;
                for (name, var) in state.params.iter() {
                    if !crate::nn::all_finite(var.as_tensor())? {
                        return Err(Error::Divergence(format!("parameter {name} became non-finite")));
                    }
                }
                let total = loss.total_value()?;
                for (slot, v) in sums.iter_mut().zip([
                    loss.distill,
                    loss.c1,
                    loss.c2.unwrap_or(0.0),
                    loss.constraint,
                    loss.moe,
                    total,
                ]) {
                    *slot += v;
                }
                c2_seen |= loss.c2.is_some();
                batches += 1;
            }
            Ok(())
        })();
        if let Err(e) = result {
            if let (Error::Divergence(_), Some(dir)) = (e.root(), out_dir) {
                save_checkpoint(&snapshot, &dir.join(LAST_GOOD_CHECKPOINT))?;
            }
            return Err(Error::Stage {
                stage: "train",
                source: Box::new(e),
            });
        }
        let mean = |v: f64| v / batches as f64;
        let record = EpochRecord {
            epoch,
            distill: mean(sums[0]),
            c1: mean(sums[1]),
            c2: c2_seen.then(|| mean(sums[2])),
            constraint: mean(sums[3]),
            moe: mean(sums[4]),
            total: mean(sums[5]),
        };
        log::info!("{}", record.csv_row());
        log.push(record);
        state.epoch = epoch + 1;
        let _ = writeln!(timing, "{epoch},{:.3}", started.elapsed().as_secs_f64());

        if let Some(dir) = out_dir {
            write_file(&dir.join(LOG_FILE), &log_csv(&log))?;
            write_file(&dir.join(TIMING_FILE), &timing)?;
            let every = cfg.train.checkpoint_every;
            if every > 0 && state.epoch % every == 0 {
                save_checkpoint(&state, &checkpoint_path(dir, state.epoch))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        write_file(&dir.join(LOG_FILE), &log_csv(&log))?;
        save_checkpoint(&state, &dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(FitOutcome { state, log })
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("checkpoint_epoch{epoch:04}.ndck"))
}

impl ModelState {
    /// Copy with independent parameter and moment storage.
    pub fn clone_deep(&self) -> Result<Self> {
        let mut optimizer = self.optimizer.clone();
        for (m, v) in optimizer.moments.values_mut() {
            *m = m.copy()?;
            *v = v.copy()?;
        }
        Ok(Self {
            config: self.config.clone(),
            params: self.params.deep_clone()?,
            optimizer,
            epoch: self.epoch,
            seed: self.seed,
        })
    }
}
