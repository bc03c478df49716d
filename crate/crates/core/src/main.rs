use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use convect_uq::cli::{self, CliError, Exit, Overrides};
use convect_uq::config::RunConfig;

/// Steady natural convection in a heated cube with surrogate-based
/// uncertainty propagation.
#[derive(Parser)]
#[command(name = "convect-uq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// INI run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `[output] dir`.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Overrides `[solver] workers`.
    #[arg(long)]
    workers: Option<usize>,
    /// Replaces every seed in the config (each use gets a fixed offset).
    #[arg(long)]
    seed_override: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one deterministic case to steady state.
    Simulate(Common),
    /// Grid study with Richardson extrapolation.
    Verify(Common),
    /// Run the solver ensembles of the enabled cases.
    Ensemble(Common),
    /// Fit polynomial chaos surrogates (case A).
    FitPce(Common),
    /// Train the field networks (case B).
    TrainDnn(Common),
    /// Monte Carlo propagation through the surrogates.
    Propagate(Common),
    /// Total Sobol indices of the case A scalar surrogate.
    Sobol(Common),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CONVECT_UQ_LOG", "warn")).init();
    let keys = RunConfig::keys_help();
    let command = Cli::command().mut_subcommands(|s| s.after_help(keys.clone()));
    let parsed = match Cli::from_arg_matches(&command.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let (common, run): (_, fn(&RunConfig, &mut dyn std::io::Write) -> Result<Exit, CliError>) = match parsed.command {
        Command::Simulate(c) => (c, cli::cmd_simulate),
        Command::Verify(c) => (c, cli::cmd_verify),
        Command::Ensemble(c) => (c, cli::cmd_ensemble),
        Command::FitPce(c) => (c, cli::cmd_fit_pce),
        Command::TrainDnn(c) => (c, cli::cmd_train_dnn),
        Command::Propagate(c) => (c, cli::cmd_propagate),
        Command::Sobol(c) => (c, cli::cmd_sobol),
    };
    let overrides = Overrides {
        out_dir: common.out_dir,
        workers: common.workers,
        seed: common.seed_override,
    };
    let result = cli::load_config(&common.config, &overrides).and_then(|cfg| run(&cfg, &mut std::io::stdout().lock()));
    let code = match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit()
        }
    };
    ExitCode::from(code as u8)
}
