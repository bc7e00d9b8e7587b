//! Flag definitions. Every command struct is also a serde type so a `--config` JSON
//! object can override any flag by its snake_case name.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use dynacq::pipeline::{MuMode, TrajInit};

#[derive(Parser, Debug)]
#[command(name = "dynacq", version, about = "Learned dynamic-MRI acquisition experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic phantom dataset.
    GenData(GenDataArgs),
    /// Train network and trajectory on k-frame units.
    Train(TrainArgs),
    /// Refine a trained run on 2k-frame units.
    Refine(RefineArgs),
    /// Metrics of a run on the validation split.
    Eval(EvalArgs),
    /// Stacked evaluation on longer sequences with transition statistics.
    StackEval(StackEvalArgs),
    /// Write trajectory or attention maps of a run.
    Export(ExportArgs),
    /// Compare two datasets volume by volume.
    Metrics(MetricsArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajArg {
    Learned,
    Radial,
    Gar,
}

impl From<TrajArg> for TrajInit {
    fn from(t: TrajArg) -> Self {
        match t {
            TrajArg::Learned => TrajInit::Learned,
            TrajArg::Radial => TrajInit::Radial,
            TrajArg::Gar => TrajInit::Gar,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MuArg {
    Abs,
    Signed,
}

impl From<MuArg> for MuMode {
    fn from(m: MuArg) -> Self {
        match m {
            MuArg::Abs => MuMode::Abs,
            MuArg::Signed => MuMode::Signed,
        }
    }
}

/// Which volumes of a dataset are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    /// The validation split used during training.
    Val,
    /// Every volume (for a separately generated held-out set).
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportWhat {
    Trajectory,
    Attention,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    /// Square image side.
    #[arg(long, default_value_t = 32)]
    pub grid: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Additive Gaussian noise sigma.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub shots: usize,
    #[arg(long, default_value_t = 64)]
    pub points_per_shot: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr_traj: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr_net: f64,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, value_enum, default_value_t = TrajArg::Learned)]
    pub traj: TrajArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Frames per acquisition window (k).
    #[arg(long, default_value_t = 4)]
    pub frames_k: usize,
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
    #[arg(long, default_value_t = 2)]
    pub blocks: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    /// Attention window as `t,h,w`.
    #[arg(long, value_delimiter = ',', default_values_t = [2, 4, 4])]
    pub window: Vec<usize>,
    #[arg(long, default_value_t = 2.0)]
    pub mlp_ratio: f64,
    /// Field of view, m.
    #[arg(long, default_value_t = 0.2)]
    pub fov: f64,
    /// Peak gradient, T/m.
    #[arg(long, default_value_t = 40e-3)]
    pub g_max: f64,
    /// Peak slew rate, T/m/s.
    #[arg(long, default_value_t = 200.0)]
    pub s_max: f64,
    /// Sampling interval, s.
    #[arg(long, default_value_t = 1e-5)]
    pub dt: f64,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineArgs {
    /// Run directory produced by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Dataset; defaults to the one recorded by `train`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory; defaults to `<run>/refined`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 5.0)]
    pub lambda_ref: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs_refine: usize,
    /// Multiplier on the training learning rates.
    #[arg(long, default_value_t = 0.1)]
    pub lr_scale: f64,
    /// Keep the network fixed and refine only the trajectory.
    #[arg(long)]
    pub freeze_net: bool,
    #[arg(long, value_enum, default_value_t = MuArg::Abs)]
    pub mu_mode: MuArg,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackEvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Frames taken from the start of each selected volume.
    #[arg(long)]
    pub total_frames: usize,
    /// Second run evaluated on the same data; its transition peak is the baseline.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = MuArg::Abs)]
    pub mu_mode: MuArg,
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    pub split: SplitArg,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub what: ExportWhat,
    /// Dataset supplying the volume for attention maps.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub volume: usize,
    /// First frame of the k-frame window fed to the network.
    #[arg(long, default_value_t = 0)]
    pub start: usize,
    #[arg(long, default_value_t = 0)]
    pub t: usize,
    #[arg(long, default_value_t = 0)]
    pub y: usize,
    #[arg(long, default_value_t = 0)]
    pub x: usize,
    #[arg(long, default_value_t = 16)]
    pub extent: usize,
    /// Attention head; mean over heads when absent.
    #[arg(long)]
    pub head: Option<usize>,
    /// Transformer block whose attention is exported.
    #[arg(long, default_value_t = 0)]
    pub block: usize,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsArgs {
    /// Dataset under test.
    #[arg(long)]
    pub x: PathBuf,
    /// Reference dataset.
    #[arg(long)]
    pub reference: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}
