//! `deepgrasp` command-line tool.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod render;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{RawConfig, Settings};

/// Failure classes, each with its own exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unknown or malformed configuration (exit 1).
    Usage(String),
    /// Missing or unreadable inputs, malformed files (exit 2).
    Data(String),
    /// Non-finite values during optimisation or scoring (exit 3).
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<deepgrasp::Error> for CliError {
    fn from(e: deepgrasp::Error) -> Self {
        use deepgrasp::Error as E;
        match e {
            E::InvalidArgument(_) => CliError::Usage(e.to_string()),
            E::NonFinite { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

const AFTER_HELP: &str = "\
Configuration: a TOML file (--config) whose tables flatten to dotted keys
such as train.lambda or detect.T. Precedence, lowest first: built-in
defaults, the file, --set KEY=VALUE pairs, dedicated flags. Unknown keys are
rejected. Every run writes resolved_config.toml to its output directory.

Exit status: 0 success, 1 usage error, 2 data error, 3 numerical failure.";

#[derive(Parser, Debug)]
#[command(name = "deepgrasp", version, about = "Grasp rectangle detection in RGB-D images", after_help = AFTER_HELP)]
struct Cli {
    /// TOML configuration file.
    #[arg(short, long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one configuration key; repeatable.
    #[arg(short = 's', long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Output directory (default: runs/<command>-<unix-millis>).
    #[arg(short, long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Dataset directory in the Cornell layout; synthetic scenes when absent.
    #[arg(long, global = true, value_name = "DIR")]
    data: Option<PathBuf>,

    /// Master seed (initialisation, subsampling, fold assignment).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic scenes and write them in the Cornell layout under
    /// <out>/dataset.
    Synth,
    /// Pretrain the hidden layers of one network as sparse autoencoders.
    Pretrain(PretrainArgs),
    /// Train the small and large cascade networks.
    Train(TrainArgs),
    /// Find the best grasp in one or all images.
    Detect(DetectArgs),
    /// Render left- and right-plate score heatmaps.
    ///
    /// Each output pixel holds the best grasp probability p among candidates
    /// whose plate centre rounds to that pixel, stored as the 8-bit grey
    /// shade 1 + round(254 p). Shade 0 is reserved for pixels that no
    /// candidate plate reaches.
    Heatmap(HeatmapArgs),
    /// Cross-validate one or more regularizers over the configured splits.
    Eval(EvalArgs),
}

#[derive(Args, Debug, Default)]
struct RegFlags {
    /// Weight regularizer: l1, l2, group_pnorm, group_max_lse, group_l0_max.
    #[arg(long)]
    reg: Option<String>,
    /// Activation sparsity weight (both layers).
    #[arg(long)]
    lambda: Option<f64>,
    /// Weight penalty on the first hidden layer.
    #[arg(long)]
    beta1: Option<f64>,
    /// Weight penalty on the second hidden layer.
    #[arg(long)]
    beta2: Option<f64>,
    /// Iteration cap for fine-tuning (and pretraining unless
    /// train.pretrain_iters is set).
    #[arg(long)]
    max_iters: Option<usize>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum)]
enum NetChoice {
    Small,
    #[default]
    Large,
}

impl NetChoice {
    fn name(self) -> &'static str {
        match self {
            NetChoice::Small => "small",
            NetChoice::Large => "large",
        }
    }
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[command(flatten)]
    reg: RegFlags,
    /// Which cascade network's sizes to pretrain.
    #[arg(long, value_enum, default_value_t = NetChoice::Large)]
    net: NetChoice,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    reg: RegFlags,
}

#[derive(Args, Debug)]
struct ModelSource {
    /// Directory holding small.model and large.model from `train`.
    #[arg(long, value_name = "DIR")]
    models: PathBuf,
    /// Image id to process; every scene when omitted.
    #[arg(long)]
    image: Option<u32>,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[command(flatten)]
    source: ModelSource,
    /// Score every candidate with the large network.
    #[arg(long, conflicts_with = "two_stage")]
    exhaustive: bool,
    /// Rank with the small network, rescore the top T with the large one
    /// (the default).
    #[arg(long)]
    two_stage: bool,
    /// Candidates passed to the second stage.
    #[arg(long = "T", value_name = "T")]
    t: Option<usize>,
    /// Skip writing overlay images.
    #[arg(long)]
    no_overlay: bool,
}

#[derive(Args, Debug)]
struct HeatmapArgs {
    #[command(flatten)]
    source: ModelSource,
    /// Which network scores the candidates.
    #[arg(long, value_enum, default_value_t = NetChoice::Large)]
    net: NetChoice,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    reg: RegFlags,
    /// Comma-separated regularizers to compare (default: train.reg).
    #[arg(long)]
    regs: Option<String>,
    /// Comma-separated splits: image_wise, object_wise.
    #[arg(long)]
    split: Option<String>,
    /// Number of folds.
    #[arg(long)]
    folds: Option<usize>,
    /// Reuse per-fold models stored here; train and store them when absent
    /// or produced under a different configuration.
    #[arg(long, value_name = "DIR")]
    model_cache: Option<PathBuf>,
}

fn apply_reg_flags(raw: &mut RawConfig, f: &RegFlags) -> CliResult<()> {
    if let Some(v) = &f.reg {
        raw.set("train.reg", v)?;
    }
    if let Some(v) = f.lambda {
        raw.set("train.lambda", &v.to_string())?;
    }
    if let Some(v) = f.beta1 {
        raw.set("train.beta1", &v.to_string())?;
    }
    if let Some(v) = f.beta2 {
        raw.set("train.beta2", &v.to_string())?;
    }
    if let Some(v) = f.max_iters {
        raw.set("train.max_iters", &v.to_string())?;
    }
    Ok(())
}

fn resolve(cli: &Cli) -> CliResult<Settings> {
    let mut raw = match &cli.config {
        Some(path) => RawConfig::load(path)?,
        None => RawConfig::default(),
    };
    for pair in &cli.set {
        raw.set_pair(pair)?;
    }
    if let Some(dir) = &cli.out {
        raw.set("output.dir", &dir.display().to_string())?;
    }
    if let Some(dir) = &cli.data {
        raw.set("data.path", &dir.display().to_string())?;
    }
    if let Some(seed) = cli.seed {
        raw.set("seed", &seed.to_string())?;
    }
    match &cli.command {
        Command::Synth | Command::Heatmap(_) => {}
        Command::Pretrain(a) => apply_reg_flags(&mut raw, &a.reg)?,
        Command::Train(a) => apply_reg_flags(&mut raw, &a.reg)?,
        Command::Detect(a) => {
            if let Some(t) = a.t {
                raw.set("detect.T", &t.to_string())?;
            }
        }
        Command::Eval(a) => {
            apply_reg_flags(&mut raw, &a.reg)?;
            if let Some(v) = &a.regs {
                raw.set("eval.regs", v)?;
            }
            if let Some(v) = &a.split {
                raw.set("eval.split", v)?;
            }
            if let Some(v) = a.folds {
                raw.set("eval.folds", &v.to_string())?;
            }
        }
    }
    Settings::resolve(&raw)
}

fn run(cli: Cli) -> CliResult<()> {
    let settings = resolve(&cli)?;
    let name = match &cli.command {
        Command::Synth => "synth",
        Command::Pretrain(_) => "pretrain",
        Command::Train(_) => "train",
        Command::Detect(_) => "detect",
        Command::Heatmap(_) => "heatmap",
        Command::Eval(_) => "eval",
    };
    let out = commands::prepare_output(&settings, name)?;
    match &cli.command {
        Command::Synth => commands::synth(&settings, &out),
        Command::Pretrain(a) => commands::pretrain(&settings, &out, a.net),
        Command::Train(_) => commands::train(&settings, &out),
        Command::Detect(a) => commands::detect(&settings, &out, a),
        Command::Heatmap(a) => commands::heatmap(&settings, &out, a),
        Command::Eval(a) => commands::eval(&settings, &out, a.model_cache.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("deepgrasp: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
