use std::path::PathBuf;
use std::process::ExitCode;

use blp_ife::commands::{cmd_diagnose, cmd_elasticity, cmd_estimate, cmd_simulate, Outcome};
use blp_ife::config::RunConfig;
use blp_ife::study::THREADS_ENV;
use clap::{Args, Parser, Subcommand};

/// LS-MD estimation of random-coefficients logit demand with interactive
/// fixed effects.
#[derive(Parser)]
#[command(name = "blp-ife", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate on a panel CSV and write estimates, inference and the
    /// residual spectrum.
    Estimate(Flags),
    /// Run a Monte Carlo study on the synthetic design.
    Simulate(Flags),
    /// Instrument-relevance surface and step-1 objective profile.
    Diagnose(Flags),
    /// Price elasticity matrices per market.
    Elasticity(Flags),
}

#[derive(Args)]
struct Flags {
    /// Panel CSV (long format: market, product, share, regressors, instruments).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Flat `key = value` settings file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of factors R used in estimation.
    #[arg(long)]
    factors: Option<String>,
    /// identity, optimal, blp-empirical or file:PATH.
    #[arg(long)]
    weight: Option<String>,
    /// Box for the taste scales, `lo,hi` (`;`-separated for several).
    #[arg(long, allow_hyphen_values = true)]
    alpha_bounds: Option<String>,
    /// Endogenous regressor columns, comma-separated.
    #[arg(long)]
    endogenous: Option<String>,
    /// Regressor columns with random coefficients (default: the first).
    #[arg(long)]
    random: Option<String>,
    /// Bias-correction bandwidth h.
    #[arg(long)]
    bandwidth: Option<String>,
    /// Gauss-Hermite nodes per random coefficient.
    #[arg(long)]
    nodes: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Monte Carlo replications.
    #[arg(long)]
    reps: Option<String>,
    /// Worker threads (falls back to BLP_IFE_THREADS, then all cores).
    #[arg(long)]
    threads: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Any other setting, as `key=value`; may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn config_from(flags: &Flags) -> blp_ife::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &flags.config {
        cfg.apply(&RunConfig::load(path)?)?;
    }
    for kv in &flags.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| blp_ife::Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k, v)?;
    }
    let paths = [("data", &flags.data), ("out", &flags.out)];
    for (key, value) in paths {
        if let Some(v) = value {
            cfg.set(key, &v.to_string_lossy())?;
        }
    }
    let values = [
        ("factors", &flags.factors),
        ("weight", &flags.weight),
        ("alpha_bounds", &flags.alpha_bounds),
        ("endogenous", &flags.endogenous),
        ("random", &flags.random),
        ("bandwidth", &flags.bandwidth),
        ("nodes", &flags.nodes),
        ("seed", &flags.seed),
        ("reps", &flags.reps),
        ("threads", &flags.threads),
    ];
    for (key, value) in values {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn run(cli: Cli) -> blp_ife::Result<Outcome> {
    let (flags, cmd): (&Flags, fn(&RunConfig) -> blp_ife::Result<Outcome>) = match &cli.command {
        Command::Estimate(f) => (f, cmd_estimate),
        Command::Simulate(f) => (f, cmd_simulate),
        Command::Diagnose(f) => (f, cmd_diagnose),
        Command::Elasticity(f) => (f, cmd_elasticity),
    };
    cmd(&config_from(flags)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            for a in &outcome.artifacts {
                println!("wrote {}", a.display());
            }
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, blp_ife::Error::Config(_)) {
                eprintln!("(settings come from --config, --set and flags; threads also from {THREADS_ENV})");
            }
            ExitCode::from(1)
        }
    }
}
