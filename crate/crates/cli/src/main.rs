use std::path::PathBuf;
use std::process::ExitCode;

use arcvc::config::{ExperimentConfig, ExperimentKind};
use arcvc::experiments;
use arcvc::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "arcvc", version, about = "Risk-constrained actor-critic experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Violation and success rates of the one-sided risk functions on the grid world.
    RiskComparison(Common),
    /// Global versus per-state reference gap across discount factors.
    ReferenceStudy(Common),
    /// Risk-network versus sample-based penalty on matched mine layouts.
    PenaltyStudy(Common),
    /// Fit the shaped risk model to gambler's-ruin samples.
    Shaping(Common),
    /// Print the default configuration.
    DefaultConfig,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seeds as a comma list (`1,2,5`) or a half-open range (`0..10`).
    #[arg(long)]
    seeds: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Number of runs executed in parallel.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Override a configuration value, e.g. `--set trainer.gamma=0.5`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, Error> {
    let bad = || Error::Config(format!("cannot parse seed list `{s}`"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        return Ok((a..b).collect());
    }
    s.split(',').filter(|p| !p.trim().is_empty()).map(|p| p.trim().parse().map_err(|_| bad())).collect()
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::DegenerateFit(_) => 3,
        Error::Training(_) => 2,
        _ => 1,
    }
}

fn execute(kind: ExperimentKind, args: Common) -> Result<u8, Error> {
    let mut cfg = ExperimentConfig::load(args.config.as_deref(), &args.overrides)?;
    if let Some(s) = &args.seeds {
        cfg.experiment.seeds = parse_seeds(s)?;
    }
    cfg.validate(kind)?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("config.toml"), cfg.to_toml())?;
    let report = experiments::run(kind, &cfg, &args.out, args.workers)?;
    for f in &report.files {
        println!("wrote {}", f.display());
    }
    for f in &report.failures {
        eprintln!("diverged: {f}");
    }
    Ok(if report.failures.is_empty() { 0 } else { 2 })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, args) = match cli.command {
        Command::RiskComparison(a) => (ExperimentKind::RiskComparison, a),
        Command::ReferenceStudy(a) => (ExperimentKind::ReferenceStudy, a),
        Command::PenaltyStudy(a) => (ExperimentKind::PenaltyStudy, a),
        Command::Shaping(a) => (ExperimentKind::Shaping, a),
        Command::DefaultConfig => {
            print!("{}", ExperimentConfig::default().to_toml());
            return ExitCode::SUCCESS;
        }
    };
    match execute(kind, args) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
