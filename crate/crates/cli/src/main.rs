use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] panoflow_core::Error),
}

impl CliError {
    /// 2 for bad configuration or invalid input contents, 3 for unreadable
    /// or corrupt data.
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_validation() => 2,
            CliError::Core(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "panoflow", version, about = "Panoptic segmentation forward pass, fusion and evaluation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for generated weights, images and palettes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Square input size (multiple of 128).
    #[arg(long, global = true)]
    size: Option<usize>,
    /// Worker threads.
    #[arg(long, global = true, env = "PANOFLOW_WORKERS")]
    workers: Option<usize>,
    /// Stuff loss weight.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Disable a flow: reg_cls, reg_stuff, reg_thing, stuff_thing or all.
    #[arg(long = "disable-flow", value_name = "NAME", global = true)]
    disable_flow: Vec<String>,
    /// Stage count override such as `stuff=2`.
    #[arg(long = "stages", value_name = "TASK=N", global = true)]
    stages: Vec<String>,
    /// Output directory (file for colorize).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the network and report every feature tensor.
    Forward(commands::ForwardArgs),
    /// Merge instance masks, stuff probabilities and detections.
    Fuse(commands::FuseArgs),
    /// Panoptic quality of a prediction archive against ground truth.
    Evaluate(commands::EvaluateArgs),
    /// Render a panoptic PNG with one color per segment.
    Colorize(commands::ColorizeArgs),
}

fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(size) = common.size {
        cfg.size = size;
    }
    if let Some(workers) = common.workers {
        cfg.workers = Some(workers);
    }
    if let Some(lambda) = common.lambda {
        cfg.lambda = lambda;
    }
    if common.out.is_some() {
        cfg.paths.out = common.out.clone();
    }
    cfg.disable_flows(&common.disable_flow)?;
    cfg.set_stages(&common.stages)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve(&cli.common)?;
    if let Some(n) = cfg.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("workers: {e}")))?;
    }
    match cli.command {
        Command::Forward(args) => commands::forward(&cfg, &args),
        Command::Fuse(args) => commands::fuse(&cfg, &args),
        Command::Evaluate(args) => commands::evaluate(&cfg, &args),
        Command::Colorize(args) => commands::colorize(&cfg, &args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("panoflow: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
