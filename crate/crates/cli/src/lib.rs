//! Operator entry point: allocation scenarios, end-to-end protocol
//! sessions, labelled anomaly campaigns and detector scoring, each driven by
//! one TOML configuration file and writing one output directory.

pub mod allocate;
pub mod campaign;
pub mod config;
pub mod error;
pub mod output;
pub mod score;
pub mod simulate;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use edgefreq_core::netsim::TransportMode;

pub use config::RunConfig;
pub use error::CliError;
use output::RunDir;

#[derive(Debug, Parser)]
#[command(name = "edgefreq", version, about = "Decentralised transmission-frequency allocation and anomaly campaigns")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the configured allocation and compare it with naive splits.
    Allocate(Common),
    /// Run gateway and devices end to end and estimate data-flow frequencies.
    Simulate(Common),
    /// Generate labelled traces and sweep the rule detector.
    Campaign(Common),
    /// Score the rule detector or an external prediction file on a trace.
    Score(ScoreArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TransportArg {
    Sim,
    Socket,
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the campaign and transport seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for this run.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub transport: Option<TransportArg>,
    /// Comma-separated detector thresholds, as fractions.
    #[arg(long, value_delimiter = ',')]
    pub threshold: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub trace: PathBuf,
    /// One predicted label per line; without it the rule detector is scored.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Predictions are per window of this many rows (truth = majority label).
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long, default_value_t = 5)]
    pub stride: usize,
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    /// Optional config supplying detector settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub threshold: Option<Vec<f64>>,
}

/// Loads the config and applies command-line overrides.
pub fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.campaign.seed = seed;
        cfg.transport.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(t) = common.transport {
        cfg.transport.mode = match t {
            TransportArg::Sim => TransportMode::Simulated,
            TransportArg::Socket => TransportMode::Socket,
        };
    }
    if let Some(t) = &common.threshold {
        cfg.detector.thresholds = t.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Executes one command and returns the human-readable summary.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    let (name, common) = match &cli.command {
        Command::Allocate(c) => ("allocate", c),
        Command::Simulate(c) => ("simulate", c),
        Command::Campaign(c) => ("campaign", c),
        Command::Score(args) => return run_score(args),
    };
    let cfg = load_config(common)?;
    let mut dir = RunDir::create(&cfg.output_dir)?;
    let summary = match &cli.command {
        Command::Allocate(_) => allocate::cmd_allocate(&cfg, Some(&mut dir))?.render(),
        Command::Simulate(_) => simulate::cmd_simulate(&cfg, Some(&mut dir))?.render(),
        Command::Campaign(_) => campaign::cmd_campaign(&cfg, Some(&mut dir))?.render(),
        Command::Score(_) => unreachable!("handled above"),
    };
    let root = dir.finish(name, &cfg.scenario, &cfg.to_toml())?;
    log::info!("{name} artifacts written to {}", root.display());
    Ok(summary)
}

fn run_score(args: &ScoreArgs) -> Result<String, CliError> {
    let mut detector = match &args.config {
        Some(path) => RunConfig::load(path)?.detector,
        None => config::DetectorSettings::default(),
    };
    if let Some(t) = &args.threshold {
        detector.thresholds = t.clone();
    }
    for t in &detector.thresholds {
        detector.at(*t).validate().map_err(|e| CliError::Config(e.to_string()))?;
    }
    let windowing = args.window.map(|window| score::Windowing { window, stride: args.stride });
    let mut dir = match &args.out {
        Some(out) => Some(RunDir::create(out)?),
        None => None,
    };
    let report = score::cmd_score(&args.trace, args.predictions.as_deref(), windowing, args.classes, &detector, dir.as_mut())?;
    if let Some(dir) = dir {
        dir.finish("score", "score", "")?;
    }
    Ok(report.render())
}
