use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use karcher_merge::tensor_io::Precision;
use karcher_merge_cli::{cmd_diagnose, cmd_inspect, cmd_merge, CliError, DiagnoseArgs, MergeArgs};

/// Merge checkpoints on the sphere and diagnose representation collapse.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a merge recipe.
    Merge {
        recipe: PathBuf,
        /// Override a recipe key, e.g. `parameters.seed=7`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Worker threads (default: logical cores).
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, value_parser = parse_precision)]
        precision: Option<Precision>,
    },
    /// Compute activation spectrum diagnostics.
    Diagnose {
        /// Activation container, or weights when --toy-forward is given.
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Generate activations by running a toy network from `input`.
        #[arg(long, value_name = "SPEC")]
        toy_forward: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// List tensor names, shapes, dtypes and norms.
    Inspect {
        checkpoint: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    Precision::parse(s).ok_or_else(|| format!("expected f32 or f64, got {s:?}"))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Merge {
            recipe,
            overrides,
            threads,
            precision,
        } => {
            let out = cmd_merge(&MergeArgs {
                recipe,
                overrides,
                threads,
                precision,
            })?;
            println!("{}", out.checkpoint.display());
            println!("{}", out.summary_path.display());
        }
        Command::Diagnose {
            input,
            out,
            draws,
            seed,
            toy_forward,
            csv,
        } => {
            let report = cmd_diagnose(&DiagnoseArgs {
                input,
                out: out.clone(),
                draws,
                seed,
                toy_forward,
                csv,
            })?;
            println!("{} layers -> {}", report.layers.len(), out.display());
        }
        Command::Inspect { checkpoint, json } => print!("{}", cmd_inspect(&checkpoint, json)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
