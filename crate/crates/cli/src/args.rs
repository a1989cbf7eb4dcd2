use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dpo_lab::loss::{BETA_RANGE, DEFAULT_BETA, DOMAIN_FLOOR};
use dpo_lab::{Axis, ExportFormat, Method, PolicyMode, Preset, Spacing};

#[derive(Debug, Parser)]
#[command(name = "dpo-lab", version, about = "Explore the DPO loss in probability-ratio coordinates")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample the loss surface on a grid.
    Landscape(GridCmd),
    /// Sample the gradient field and region labels on a grid.
    Field(FieldCmd),
    /// Integrate the gradient flow from one initial point.
    Flow(FlowCmd),
    /// Integrate the flow from every node of a grid.
    Sweep(SweepCmd),
    /// Train a tabular softmax policy with the full DPO loss.
    Train(TrainCmd),
    /// Compare analytic gradients with central finite differences.
    CheckGrad(CheckGradCmd),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Landscape(_) => "landscape",
            Command::Field(_) => "field",
            Command::Flow(_) => "flow",
            Command::Sweep(_) => "sweep",
            Command::Train(_) => "train",
            Command::CheckGrad(_) => "check-grad",
        }
    }
}

#[derive(Debug, Args)]
pub struct Common {
    /// Temperature, in [0.01, 2].
    #[arg(long, default_value_t = DEFAULT_BETA, value_parser = parse_beta, allow_negative_numbers = true)]
    pub beta: f64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

impl From<Format> for ExportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => ExportFormat::Csv,
            Format::Json => ExportFormat::Json,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SpacingArg {
    Linear,
    Log,
}

impl From<SpacingArg> for Spacing {
    fn from(s: SpacingArg) -> Self {
        match s {
            SpacingArg::Linear => Spacing::Linear,
            SpacingArg::Log => Spacing::Logarithmic,
        }
    }
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Axis as `min:max:n`; applies to both axes unless --grid2 is given.
    #[arg(long, default_value = "0.01:2:50", value_parser = parse_axis)]
    pub grid: Axis,
    /// x2 axis as `min:max:n`.
    #[arg(long, value_parser = parse_axis)]
    pub grid2: Option<Axis>,
    #[arg(long, value_enum, default_value_t = SpacingArg::Linear)]
    pub spacing: SpacingArg,
}

#[derive(Debug, Args)]
pub struct ThresholdArgs {
    /// Lower region threshold (default: 25% of the grid span).
    #[arg(long, value_parser = parse_positive, allow_negative_numbers = true)]
    pub low: Option<f64>,
    /// Upper region threshold (default: 75% of the grid span).
    #[arg(long, value_parser = parse_positive, allow_negative_numbers = true)]
    pub high: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GridCmd {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub grid: GridArgs,
}

#[derive(Debug, Args)]
pub struct FieldCmd {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Euler,
    Rk4,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Euler => Method::Euler,
            MethodArg::Rk4 => Method::Rk4,
        }
    }
}

#[derive(Debug, Args)]
pub struct IntegratorArgs {
    #[arg(long, value_enum, default_value_t = MethodArg::Rk4)]
    pub method: MethodArg,
    /// Time step.
    #[arg(long, default_value_t = 1e-3, value_parser = parse_positive, allow_negative_numbers = true)]
    pub step: f64,
    #[arg(long, default_value_t = 1_000_000, value_parser = parse_count)]
    pub max_steps: usize,
    /// Stop once the loss falls to this value.
    #[arg(long, default_value_t = 1e-4, value_parser = parse_nonnegative, allow_negative_numbers = true)]
    pub stop_loss: f64,
    /// Smallest admissible x2.
    #[arg(long, default_value_t = DOMAIN_FLOOR, value_parser = parse_floor, allow_negative_numbers = true)]
    pub floor: f64,
    /// Gradient-norm threshold for slow regions.
    #[arg(long, default_value_t = dpo_lab::flow::DEFAULT_SLOW_EPS, value_parser = parse_positive, allow_negative_numbers = true)]
    pub slow_eps: f64,
}

#[derive(Debug, Args)]
pub struct FlowCmd {
    #[command(flatten)]
    pub common: Common,
    /// Initial point `x1,x2`.
    #[arg(long, value_parser = parse_pair, allow_negative_numbers = true)]
    pub init: (f64, f64),
    #[command(flatten)]
    pub integrator: IntegratorArgs,
}

#[derive(Debug, Args)]
pub struct SweepCmd {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
    #[command(flatten)]
    pub integrator: IntegratorArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Atomic,
    Autoregressive,
}

impl From<ModeArg> for PolicyMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Atomic => PolicyMode::Atomic,
            ModeArg::Autoregressive => PolicyMode::Autoregressive,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    TopLeft,
    TopRight,
    BottomRight,
    BottomLeft,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::TopLeft => Preset::TopLeft,
            PresetArg::TopRight => Preset::TopRight,
            PresetArg::BottomRight => Preset::BottomRight,
            PresetArg::BottomLeft => Preset::BottomLeft,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReferenceArg {
    /// Frozen copy of the initial policy.
    Init,
    /// Uniform policy of the same shape.
    Uniform,
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_enum, default_value_t = ModeArg::Atomic)]
    pub mode: ModeArg,
    /// Responses per prompt (atomic mode).
    #[arg(long, default_value_t = 4, value_parser = parse_count)]
    pub k: usize,
    /// Token vocabulary (autoregressive mode).
    #[arg(long, default_value_t = 4, value_parser = parse_count)]
    pub vocab: usize,
    /// Longest response (autoregressive mode).
    #[arg(long, default_value_t = 4, value_parser = parse_count)]
    pub max_len: usize,
    /// Starting probabilities for each prompt's tracked pair (atomic mode).
    #[arg(long, value_enum, conflicts_with = "preset_probs")]
    pub preset: Option<PresetArg>,
    /// Custom starting probabilities `pi_w,pi_l` (atomic mode).
    #[arg(long, value_parser = parse_pair, allow_negative_numbers = true)]
    pub preset_probs: Option<(f64, f64)>,
    #[arg(long, value_enum, default_value_t = ReferenceArg::Init)]
    pub reference: ReferenceArg,
    /// Line-delimited JSON preference triples.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1, value_parser = parse_positive, allow_negative_numbers = true)]
    pub lr: f64,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    /// Index of the triple whose probabilities are traced.
    #[arg(long, default_value_t = 0)]
    pub tracked: usize,
}

#[derive(Debug, Args)]
pub struct CheckGradCmd {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 1000, value_parser = parse_count)]
    pub samples: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Check a single point `x1,x2` instead of random samples.
    #[arg(long, value_parser = parse_pair, allow_negative_numbers = true)]
    pub point: Option<(f64, f64)>,
    /// Finite-difference half-width.
    #[arg(long, default_value_t = dpo_lab::verify::DEFAULT_FD_STEP, value_parser = parse_positive, allow_negative_numbers = true)]
    pub h: f64,
}

fn parse_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("'{s}' is not a number"))?;
    if !v.is_finite() {
        return Err(format!("'{s}' is not finite"));
    }
    Ok(v)
}

fn parse_beta(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    let (lo, hi) = BETA_RANGE;
    if !(lo..=hi).contains(&v) {
        return Err(format!("beta must lie in [{lo}, {hi}]"));
    }
    Ok(v)
}

fn parse_positive(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v <= 0.0 {
        return Err("must be positive".into());
    }
    Ok(v)
}

fn parse_nonnegative(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v < 0.0 {
        return Err("must be nonnegative".into());
    }
    Ok(v)
}

fn parse_floor(s: &str) -> Result<f64, String> {
    let v = parse_f64(s)?;
    if v < DOMAIN_FLOOR {
        return Err(format!("must be at least {DOMAIN_FLOOR:e}"));
    }
    Ok(v)
}

fn parse_count(s: &str) -> Result<usize, String> {
    let n: usize = s.trim().parse().map_err(|_| format!("'{s}' is not a nonnegative integer"))?;
    if n == 0 {
        return Err("must be at least 1".into());
    }
    Ok(n)
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected `a,b`, got '{s}'"))?;
    Ok((parse_f64(a)?, parse_f64(b)?))
}

fn parse_axis(s: &str) -> Result<Axis, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [min, max, n] = parts[..] else {
        return Err(format!("expected `min:max:n`, got '{s}'"));
    };
    let n: usize = n.trim().parse().map_err(|_| format!("'{n}' is not a sample count"))?;
    Axis::new(parse_f64(min)?, parse_f64(max)?, n).map_err(|e| e.to_string())
}
