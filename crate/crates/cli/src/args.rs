use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use cada_core::align::StatVariant;
use cada_core::cada::{Activation, HeadConfig, HeadMode, LrSchedule, Structure, TargetSpace, TrainConfig};
use cada_core::metrics::TopFraction;
use cada_core::synthbench::SynthConfig;

#[derive(Debug, Parser)]
#[command(
    name = "cada",
    version,
    about = "Score distribution alignment for multi-class anomaly detection",
    long_about = "Pipeline stages exchange files only: gen -> fit-base -> score -> stats -> \
                  train-head -> align -> eval -> report. Every run writes resolved_config.json \
                  into its output directory.\n\nExit codes: 0 success, 1 usage error, 2 data or \
                  validation error, 3 numerical failure."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-class dataset with class-dependent score scales.
    Gen(GenArgs),
    /// Sample a nearest-neighbour memory bank from the training features.
    FitBase(FitBaseArgs),
    /// Score images by distance to the memory bank.
    Score(ScoreArgs),
    /// Fit per-class score statistics on the training maps.
    Stats(StatsArgs),
    /// Train a statistics regressor or a class classifier.
    TrainHead(TrainHeadArgs),
    /// Normalize test score maps.
    Align(AlignArgs),
    /// Compute mixed and per-class detection metrics.
    Eval(EvalArgs),
    /// Score histograms per class and merged metric tables.
    Report(ReportArgs),
    /// Compare analytic and finite-difference gradients of head networks.
    GradCheck(GradCheckArgs),
    /// Sweep head structure, dropout rate and image-score aggregation.
    Ablate(AblateArgs),
}

/// Reads a JSON file into `T`, or returns the default.
fn load_json<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn set<T: Copy>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// JSON file with benchmark settings; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub k_classes: Option<usize>,
    #[arg(long, num_args = 2, value_names = ["H", "W"])]
    pub grid: Option<Vec<usize>>,
    #[arg(long)]
    pub feat_dim: Option<usize>,
    #[arg(long)]
    pub center_radius: Option<f64>,
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
    pub spread_range: Option<Vec<f64>>,
    #[arg(long)]
    pub anomaly_magnitude: Option<f64>,
    #[arg(long, num_args = 2, value_names = ["MIN", "MAX"])]
    pub anomaly_area_range: Option<Vec<f64>>,
    #[arg(long)]
    pub train_normal: Option<usize>,
    #[arg(long)]
    pub test_normal: Option<usize>,
    #[arg(long)]
    pub test_anomalous: Option<usize>,
    /// Anomalous images added to each class's training split, labelled normal.
    #[arg(long)]
    pub train_noise: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl SynthArgs {
    pub fn resolve(&self) -> Result<SynthConfig> {
        let mut c: SynthConfig = load_json(self.config.as_deref())?;
        set(&mut c.k_classes, self.k_classes);
        if let Some(g) = &self.grid {
            c.grid = [g[0], g[1]];
        }
        set(&mut c.feat_dim, self.feat_dim);
        set(&mut c.center_radius, self.center_radius);
        if let Some(r) = &self.spread_range {
            c.spread_range = [r[0], r[1]];
        }
        set(&mut c.anomaly_rel_magnitude, self.anomaly_magnitude);
        if let Some(r) = &self.anomaly_area_range {
            c.anomaly_area_range = [r[0], r[1]];
        }
        set(&mut c.train_normal, self.train_normal);
        set(&mut c.test_normal, self.test_normal);
        set(&mut c.test_anomalous, self.test_anomalous);
        set(&mut c.train_noise, self.train_noise);
        set(&mut c.seed, self.seed);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct HeadArgs {
    /// JSON file with head settings; flags below override it.
    #[arg(long)]
    pub head_config: Option<PathBuf>,
    /// One of 1lin, 2lin, 3lin, 1conv+2lin, 2conv+2lin.
    #[arg(long)]
    pub structure: Option<Structure>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// gelu or relu.
    #[arg(long)]
    pub activation: Option<Activation>,
    /// Regression target pair: meanmax or meanstd.
    #[arg(long)]
    pub target: Option<StatVariant>,
    /// Space in which targets are standardized: log or linear.
    #[arg(long)]
    pub target_space: Option<TargetSpace>,
    /// Smooth-L1 threshold in standardized target units.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Dropout passes averaged at prediction; 0 disables dropout at prediction.
    #[arg(long)]
    pub mc_samples: Option<usize>,
}

impl HeadArgs {
    pub fn resolve(&self, mode: HeadMode) -> Result<HeadConfig> {
        let mut c: HeadConfig = load_json(self.head_config.as_deref())?;
        c.mode = mode;
        set(&mut c.structure, self.structure);
        set(&mut c.hidden_dim, self.hidden_dim);
        set(&mut c.dropout_rate, self.dropout);
        set(&mut c.activation, self.activation);
        set(&mut c.target, self.target);
        set(&mut c.target_space, self.target_space);
        set(&mut c.alpha, self.alpha);
        set(&mut c.mc_samples, self.mc_samples);
        c.validate()?;
        Ok(c)
    }
}

/// Gradient clipping threshold, or `none`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Clip(pub Option<f64>);

impl std::str::FromStr for Clip {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "none" {
            return Ok(Clip(None));
        }
        s.parse().map(|v| Clip(Some(v))).map_err(|_| format!("expected a number or none, got {s:?}"))
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// JSON file with optimizer settings; flags below override it.
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// constant or cosine.
    #[arg(long)]
    pub lr_schedule: Option<LrSchedule>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Largest gradient L2 norm per step, or none.
    #[arg(long)]
    pub clip_norm: Option<Clip>,
    #[arg(long = "train-seed")]
    pub seed: Option<u64>,
}

impl TrainArgs {
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut c: TrainConfig = load_json(self.train_config.as_deref())?;
        set(&mut c.lr, self.lr);
        set(&mut c.lr_schedule, self.lr_schedule);
        set(&mut c.momentum, self.momentum);
        set(&mut c.weight_decay, self.weight_decay);
        set(&mut c.batch_size, self.batch_size);
        set(&mut c.iterations, self.iterations);
        if let Some(Clip(v)) = self.clip_norm {
            c.clip_norm = v;
        }
        set(&mut c.seed, self.seed);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {
    #[command(flatten)]
    pub synth: SynthArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct FitBaseArgs {
    /// Dataset directory holding manifest.json.
    #[arg(long)]
    pub data: PathBuf,
    /// Feature locations sampled from each training image.
    #[arg(long, default_value_t = 16)]
    pub m_per_image: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitSel {
    Train,
    Test,
    All,
}

#[derive(Debug, Args, Serialize)]
pub struct ScoreArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Directory written by fit-base.
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitSel::All)]
    pub split: SplitSel,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct StatsArgs {
    /// Directory with a manifest whose train images have score maps.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainHeadArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// regressor or classifier.
    #[arg(long, default_value = "regressor")]
    pub mode: HeadMode,
    #[command(flatten)]
    pub head: HeadArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    /// Copy the maps unchanged.
    None,
    /// Statistics of each image's labelled class.
    Oracle,
    /// Statistics of the class a trained classifier picks.
    Classifier,
    /// Statistics a trained regressor predicts from the features.
    Regressor,
}

#[derive(Debug, Args, Serialize)]
pub struct AlignArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub mode: AlignMode,
    /// class_stats.csv written by the stats command.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Checkpoint directory written by train-head.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// meanmax or meanstd; for the regressor it must match the trained target.
    #[arg(long, default_value = "meanmax")]
    pub variant: StatVariant,
    #[arg(long, default_value_t = cada_core::align::DEFAULT_EPS)]
    pub eps: f64,
    #[arg(long, value_enum, default_value_t = SplitSel::Test)]
    pub split: SplitSel,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Image score: `max` or the fraction of highest pixels averaged.
    #[arg(long, default_value = "0.01")]
    pub top: TopFraction,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// Manifest directory whose test maps are histogrammed.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "0.01")]
    pub top: TopFraction,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    /// Metric tables to merge, as NAME=PATH.
    #[arg(long = "metrics")]
    pub metrics: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GradCheckArgs {
    /// Structures to check; all five when omitted.
    #[arg(long = "structure")]
    pub structures: Vec<Structure>,
    #[arg(long, default_value = "regressor")]
    pub mode: HeadMode,
    /// Output classes in classifier mode.
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [5, 5])]
    pub size: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 0.25)]
    pub dropout: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub head: HeadArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Structures to sweep; all five when omitted.
    #[arg(long = "grid-structure")]
    pub structures: Vec<Structure>,
    /// Dropout rates to sweep; 0, 0.25, 0.5 and 0.75 when omitted.
    #[arg(long = "grid-dropout")]
    pub dropout_rates: Vec<f64>,
    /// Image-score aggregations to sweep; max, 0.001, 0.01 and 0.02 when omitted.
    #[arg(long = "grid-top")]
    pub tops: Vec<TopFraction>,
    #[arg(long, default_value_t = cada_core::align::DEFAULT_EPS)]
    pub eps: f64,
    #[arg(long)]
    pub out: PathBuf,
}
