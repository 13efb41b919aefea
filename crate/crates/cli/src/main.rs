use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod error;
mod output;

use commands::{Context, Overrides};
use error::{CliError, EXIT_CONFIG};

/// Empirical Cramér–Rao bounds from conditional normalizing flows.
#[derive(Parser)]
#[command(name = "gcrb", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a flow on a synthetic dataset and save it with its trusted region.
    Train(Common),
    /// eGCRB, trace, condition and relative error over the grid.
    Eval(Common),
    /// Relative error over repeated seeds for each m.
    SweepM(Common),
    /// Train one model per dataset size and score each on the grid.
    SweepDataset(Common),
    /// Position and width bounds along the edge image.
    EdgeCurves(Common),
    /// Learning-error bound on the Fisher information of a 1-D model.
    Theorem1(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_seed: Option<u64>,
    /// Fisher samples per grid point.
    #[arg(long)]
    m: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Model file; defaults to the channel's exact generator.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Sequential evaluation and zeroed timings for byte-stable output.
    #[arg(long)]
    deterministic: bool,
    /// Keep samples outside the trusted region.
    #[arg(long)]
    no_trim: bool,
}

impl Common {
    fn context(self) -> Result<Context, CliError> {
        let o = Overrides {
            seed: self.seed,
            eval_seed: self.eval_seed,
            m: self.m,
            out: self.out,
            model: self.model,
            deterministic: self.deterministic,
            no_trim: self.no_trim,
        };
        Context::new(&self.config, o)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(c) => commands::cmd_train(&c.context()?),
        Command::Eval(c) => commands::cmd_eval(&c.context()?),
        Command::SweepM(c) => commands::cmd_sweep_m(&c.context()?),
        Command::SweepDataset(c) => commands::cmd_sweep_dataset(&c.context()?),
        Command::EdgeCurves(c) => commands::cmd_edge_curves(&c.context()?),
        Command::Theorem1(c) => commands::cmd_theorem1(&c.context()?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gcrb: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
