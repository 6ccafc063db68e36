//! The `rediffuse` command set: dataset generation, training, fusion,
//! equivariance verification and fusion metrics.

pub mod error;
pub mod fuse;
pub mod gen_data;
pub mod metrics;
pub mod train;
pub mod verify;

use std::io::Write;

use clap::{Parser, Subcommand};

pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "rediffuse", version, about = "Rotation-equivariant diffusion for multi-focus image fusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic multi-focus pairs as PGM files plus a manifest.
    GenData(gen_data::GenDataArgs),
    /// Train a model on a generated dataset.
    Train(train::TrainArgs),
    /// Fuse two source images with a trained checkpoint.
    Fuse(fuse::FuseArgs),
    /// Run an equivariance verification suite.
    Verify(verify::VerifyArgs),
    /// Score a fused image against its sources.
    Metrics(metrics::MetricsArgs),
}

/// Runs one command, writing its stdout records to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => gen_data::run(&a, out),
        Command::Train(a) => train::run(&a, out),
        Command::Fuse(a) => fuse::run(&a, out),
        Command::Verify(a) => verify::run(&a, out),
        Command::Metrics(a) => metrics::run(&a, out),
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run_args<I, S>(args: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::usage(e.to_string()))?;
    run(cli, out)
}

pub(crate) fn emit(out: &mut dyn Write, line: &str) -> Result<(), CliError> {
    writeln!(out, "{line}").map_err(CliError::from)
}

/// Fixed six-decimal rendering used by every numeric record.
pub fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}
