//! Command-line front end. Usage errors exit with 2, runtime failures with 1.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::data::{
    generate_synthetic, load_dataset, read_image, write_heatmap, write_overlay, write_raw_map, DatasetRoot, Split,
    SynthSpec,
};
use crate::encoders::Backends;
use crate::error::{Error, Result, StageExt};
use crate::pipeline::{fit, load_checkpoint, ModelState, FINAL_CHECKPOINT};
use crate::sample::ImageSample;
use crate::scoring::{evaluate, ground_truth_results, report_from_results, score_samples, MetricsReport};

#[derive(Debug, Parser)]
#[command(name = "normdistill", version, about = "Multi-class anomaly detection by cross-modal normality distillation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic texture dataset with defect masks.
    Synth(SynthArgs),
    /// Train one model on the pooled normal images of every category.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split and write a metrics CSV.
    Eval(EvalArgs),
    /// Score one image and export its anomaly map.
    Score(ScoreArgs),
    /// Train and evaluate a grid of component or mixture-of-experts variants.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML generator spec; defaults apply when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Replace the category directories of an existing dataset.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data_root: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated category subset.
    #[arg(long, value_delimiter = ',')]
    pub categories: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Detector {
    Model,
    /// Uses each ground-truth mask as its own anomaly map.
    GroundTruth,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_if_eq("detector", "model"))]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data_root: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, value_enum, default_value_t = Detector::Model)]
    pub detector: Detector,
    #[arg(long, value_delimiter = ',')]
    pub categories: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// 16-bit grayscale map, full white at 6.0.
    #[arg(long)]
    pub heatmap: PathBuf,
    /// Lossless map dump: `RMAP`, u32 height, u32 width, f32 values (little-endian).
    #[arg(long)]
    pub raw: Option<PathBuf>,
    /// Jet colormap blended over the input image.
    #[arg(long)]
    pub overlay: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    /// Number of experts T in 1..=6 with top-K up to 4, plus a run without MoE.
    Moe,
    /// All seven on/off combinations of fusion, normality constraint and MoE.
    Components,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_enum)]
    pub grid: Grid,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Existing dataset; a default synthetic one is generated under
    /// `<out-dir>/data` otherwise.
    #[arg(long)]
    pub data_root: Option<PathBuf>,
}

/// Parses `argv` and runs it, returning the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                if !matches!(s.downcast_ref::<Error>(), Some(Error::Stage { .. })) {
                    eprintln!("  caused by: {s}");
                }
                source = s.source();
            }
            1
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Score(a) => score(&a),
        Command::Ablate(a) => ablate(&a),
    }
}

fn synth(a: &SynthArgs) -> Result<()> {
    let spec = match &a.spec {
        Some(p) => SynthSpec::load(p).stage("config")?,
        None => SynthSpec::default(),
    };
    let root = generate_synthetic(&spec, &a.out, a.overwrite).stage("synth")?;
    println!("wrote {} categories to {}", root.categories.len(), root.root.display());
    Ok(())
}

fn load_split(root: &Path, split: Split, filter: Option<&[String]>, resolution: Option<usize>) -> Result<Vec<ImageSample>> {
    let root = DatasetRoot::open(root).stage("data")?;
    load_dataset(&root, split, filter, resolution).stage("data")
}

fn train_run(cfg: &RunConfig, train: &[ImageSample], out_dir: &Path) -> Result<ModelState> {
    let backends = Backends::build(cfg).stage("encoder")?;
    let state = ModelState::init(cfg, &backends).stage("init")?;
    Ok(fit(state, &backends, train, Some(out_dir))?.state)
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config).stage("config")?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    let samples = load_split(&a.data_root, Split::Train, a.categories.as_deref(), Some(cfg.encoder.resolution))?;
    log::info!("training on {} images", samples.len());
    let state = train_run(&cfg, &samples, &a.out_dir)?;
    println!("trained {} epochs; checkpoint at {}", state.epoch, a.out_dir.join(FINAL_CHECKPOINT).display());
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let state = a.checkpoint.as_deref().map(load_checkpoint).transpose().stage("checkpoint")?;
    let resolution = state.as_ref().map(|s| s.config.encoder.resolution);
    let samples = load_split(&a.data_root, Split::Test, a.categories.as_deref(), resolution)?;
    let report = match (a.detector, &state) {
        (Detector::Model, Some(state)) => {
            let backends = Backends::build(&state.config).stage("encoder")?;
            evaluate(state, &backends, &samples)?
        }
        (Detector::Model, None) => return Err(Error::Input("--checkpoint is required for the model detector".into())),
        (Detector::GroundTruth, _) => {
            let eval = state.as_ref().map(|s| s.config.eval.clone()).unwrap_or_default();
            let results = ground_truth_results(&samples).stage("score")?;
            report_from_results(&samples, &results, &eval).stage("metrics")?
        }
    };
    report.write_csv(&a.report).stage("report")?;
    print!("{}", report.to_csv());
    Ok(())
}

fn score(a: &ScoreArgs) -> Result<()> {
    let state = load_checkpoint(&a.checkpoint).stage("checkpoint")?;
    let backends = Backends::build(&state.config).stage("encoder")?;
    let image = read_image(&a.image, Some(state.config.encoder.resolution)).stage("data")?;
    let result = score_samples(&state, &backends, std::slice::from_ref(&image))?.remove(0);
    write_heatmap(&result, &a.heatmap).stage("export")?;
    if let Some(raw) = &a.raw {
        write_raw_map(&result, raw).stage("export")?;
    }
    if let Some(path) = &a.overlay {
        write_overlay(&image, &result, path).stage("export")?;
    }
    let (y, x) = result.argmax();
    println!("image_score={:.6} argmax=({y},{x})", result.image_score);
    Ok(())
}

/// One variant of an ablation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub mlf: bool,
    pub cnc: bool,
    pub moe: bool,
    pub num_experts: usize,
    pub top_k: usize,
}

impl Variant {
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.model.mlf = self.mlf;
        cfg.model.cnc = self.cnc;
        cfg.model.moe = self.moe;
        cfg.moe.num_experts = self.num_experts;
        cfg.moe.top_k = self.top_k;
        cfg
    }
}

/// Variants in table order. The MoE grid keeps the base fusion and
/// constraint switches.
pub fn grid_variants(grid: Grid, base: &RunConfig) -> Vec<Variant> {
    let (t, k) = (base.moe.num_experts, base.moe.top_k);
    match grid {
        Grid::Components => [
            (false, false, false),
            (true, false, false),
            (false, true, false),
            (false, false, true),
            (true, true, false),
            (true, false, true),
            (true, true, true),
        ]
        .into_iter()
        .map(|(mlf, cnc, moe)| {
            let parts: Vec<&str> = [(mlf, "mlf"), (cnc, "cnc"), (moe, "moe")]
                .into_iter()
                .filter_map(|(on, n)| on.then_some(n))
                .collect();
            Variant {
                name: if parts.is_empty() { "base".into() } else { parts.join("+") },
                mlf,
                cnc,
                moe,
                num_experts: t,
                top_k: k,
            }
        })
        .collect(),
        Grid::Moe => {
            let none = Variant {
                name: "none".into(),
                mlf: base.model.mlf,
                cnc: base.model.cnc,
                moe: false,
                num_experts: t,
                top_k: k,
            };
            let mut out = vec![none.clone()];
            for t in 1..=6 {
                for k in 1..=t.min(4) {
                    out.push(Variant {
                        name: format!("t{t}k{k}"),
                        moe: true,
                        num_experts: t,
                        top_k: k,
                        ..none.clone()
                    });
                }
            }
            out
        }
    }
}

pub const ABLATION_HEADER: &str = "run,mlf,cnc,moe,num_experts,top_k,i_auroc,p_auroc,aupro,i_map,p_map";

fn ablate(a: &AblateArgs) -> Result<()> {
    let base = RunConfig::load(&a.config).stage("config")?;
    let data_root = match &a.data_root {
        Some(p) => p.clone(),
        None => {
            let dir = a.out_dir.join("data");
            if !dir.join("synth.toml").is_file() {
                generate_synthetic(&SynthSpec::default(), &dir, true).stage("synth")?;
            }
            dir
        }
    };
    let res = Some(base.encoder.resolution);
    let train_set = load_split(&data_root, Split::Train, None, res)?;
    let test_set = load_split(&data_root, Split::Test, None, res)?;
    let mut csv = format!("{ABLATION_HEADER}\n");
    for v in grid_variants(a.grid, &base) {
        let cfg = v.apply(&base);
        cfg.validate().stage("config")?;
        let dir = a.out_dir.join(&v.name);
        let state = train_run(&cfg, &train_set, &dir)?;
        let backends = Backends::build(&cfg).stage("encoder")?;
        let report: MetricsReport = evaluate(&state, &backends, &test_set)?;
        report.write_csv(&dir.join("report.csv")).stage("report")?;
        let _ = write!(csv, "{},{},{},{},{},{}", v.name, v.mlf, v.cnc, v.moe, v.num_experts, v.top_k);
        for m in report.mean.values() {
            let _ = write!(csv, ",{m:.6}");
        }
        csv.push('\n');
        log::info!("{} done", v.name);
    }
    let path = a.out_dir.join("ablation.csv");
    std::fs::write(&path, &csv).map_err(|e| Error::io(&path, e)).stage("report")?;
    print!("{csv}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn component_grid_covers_every_combination() {
        let v = grid_variants(Grid::Components, &RunConfig::default());
        assert_eq!(v.len(), 7);
        assert_eq!(v[0].name, "base");
        assert_eq!(v[6].name, "mlf+cnc+moe");
        let mut combos: Vec<_> = v.iter().map(|v| (v.mlf, v.cnc, v.moe)).collect();
        combos.sort();
        combos.dedup();
        assert_eq!(combos.len(), 7);
    }

    #[test]
    fn moe_grid_respects_k_at_most_t() {
        let v = grid_variants(Grid::Moe, &RunConfig::default());
        assert_eq!(v.len(), 1 + 1 + 2 + 3 + 4 + 4 + 4);
        assert!(v.iter().all(|v| v.top_k <= v.num_experts));
        assert!(v.iter().skip(1).all(|v| v.moe && v.apply(&RunConfig::default()).validate().is_ok()));
    }

    #[test]
    fn usage_errors_exit_with_two() {
        assert_eq!(main_with_args(["normdistill", "train", "--config"]), 2);
        assert_eq!(main_with_args(["normdistill", "frobnicate"]), 2);
        assert_eq!(main_with_args(["normdistill", "ablate", "--config", "x", "--grid", "big", "--out-dir", "y"]), 2);
    }

    #[test]
    fn runtime_errors_exit_with_one() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("absent.toml");
        let d = dir.path().to_str().unwrap();
        let m = missing.to_str().unwrap();
        let code = main_with_args(["normdistill", "train", "--config", m, "--data-root", d, "--out-dir", d]);
        assert_eq!(code, 1);
    }
}
