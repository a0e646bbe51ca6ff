//! `hpotts`: segmentation of synthetic phantoms with the hidden Potts model
//! and an external-field spatial prior.
//!
//! Exit codes: 0 success, 1 usage or configuration, 2 data or format,
//! 3 numerical failure.

mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hidden_potts::Error;

#[derive(Debug, Parser)]
#[command(
    name = "hpotts",
    version,
    about = "Hidden Potts segmentation with an external-field prior"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Random seed; overrides any seed in a JSON config
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Maximum number of worker threads
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a ground-truth phantom and a noisy image of it
    Phantom(commands::PhantomArgs),
    /// Tabulate the expected sufficient statistic over a grid of beta
    Calibrate(commands::CalibrateArgs),
    /// Build an external-field prior from a reference segmentation
    Field(commands::FieldArgs),
    /// Run the posterior sampler on an image
    Segment(commands::SegmentArgs),
    /// Update displacement hyperparameters from a fitted chain
    Update(commands::UpdateArgs),
    /// Summarise score tables from several runs
    Report(commands::ReportArgs),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidSpec(_) | Error::InvalidConfig(_) | Error::Json(_) => 1,
        Error::Domain(_) | Error::Extrapolation { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let workers = cli
        .common
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        eprintln!("error: --workers must be at least 1");
        return ExitCode::from(1);
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(2);
        }
    };
    let result = pool.install(|| {
        std::fs::create_dir_all(&cli.common.out)?;
        match &cli.command {
            Command::Phantom(a) => commands::phantom(&cli.common, a),
            Command::Calibrate(a) => commands::calibrate(&cli.common, a),
            Command::Field(a) => commands::field(&cli.common, a),
            Command::Segment(a) => commands::segment(&cli.common, a),
            Command::Update(a) => commands::update(&cli.common, a),
            Command::Report(a) => commands::report(&cli.common, a),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
