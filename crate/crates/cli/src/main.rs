//! `feat`: generation, prediction, toy training and property probes.

mod commands;
mod error;
mod report;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::predict::PredictArgs;
use commands::Context;
use error::{exit, CliError};
use report::RunReport;

#[derive(Debug, Parser)]
#[command(name = "feat", version, about = "Dual-axis tabular encoder: data, inference and property checks")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// JSON configuration overriding the command defaults.
    #[arg(long, global = true, value_name = "JSON")]
    config: Option<PathBuf>,
    /// Seed overriding every seed in the configuration.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Directory for reports and artifacts.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out: PathBuf,
    /// Worker threads.
    #[arg(long, global = true, value_name = "N", value_parser = clap::value_parser!(u64).range(1..))]
    threads: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic table: data.csv, data.json, meta.json.
    Gen,
    /// Predict the rows of a CSV whose target field is empty.
    Predict {
        /// Table with a header row; empty fields are missing.
        #[arg(long)]
        data: PathBuf,
        /// Target declaration; defaults to the data path with a .json extension.
        #[arg(long)]
        sidecar: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also reconstruct missing cells.
        #[arg(long)]
        impute: bool,
    },
    /// Inference latency and analytic flops over a grid of sample counts.
    BenchLatency,
    /// Monte-Carlo variance of the memory state and the smoothing convolution.
    CheckVariance,
    /// Jacobian-norm influence profiles of the bidirectional scan.
    CheckInfluence,
    /// End-to-end finite-difference gradient check per parameter group.
    CheckGrad,
    /// Recurrent scan against its closed-form unrolled sum.
    ScanOracle,
    /// Train on a synthetic task stream; writes loss.csv and model.ckpt.
    TrainToy,
}

fn run(cli: Cli) -> Result<RunReport, CliError> {
    let ctx = Context {
        config: cli.global.config,
        seed: cli.global.seed,
        out: cli.global.out,
        threads: cli.global.threads.map(|t| t as usize),
    };
    if let Some(t) = ctx.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Internal(e.to_string()))?;
    }
    match cli.command {
        Command::Gen => commands::gen::run(&ctx),
        Command::Predict {
            data,
            sidecar,
            checkpoint,
            impute,
        } => commands::predict::run(
            &ctx,
            &PredictArgs {
                data,
                sidecar,
                checkpoint,
                impute,
            },
        ),
        Command::BenchLatency => commands::bench::run(&ctx),
        Command::CheckVariance => commands::checks::check_variance(&ctx),
        Command::CheckInfluence => commands::checks::check_influence(&ctx),
        Command::CheckGrad => commands::checks::check_grad(&ctx),
        Command::ScanOracle => commands::checks::scan_oracle(&ctx),
        Command::TrainToy => commands::train::run(&ctx),
    }
    .and_then(|mut report| {
        let text = report.write(&ctx.out)?;
        println!("{text}");
        match report.failures() {
            f if f.is_empty() => Ok(report),
            f => Err(CliError::Property(f.iter().map(|s| s.to_string()).collect())),
        }
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { exit::OK };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(_) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("feat: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
