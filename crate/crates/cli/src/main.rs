use std::path::PathBuf;
use std::process::ExitCode;

use admt_cli::ablate::cmd_ablate;
use admt_cli::eval::cmd_eval;
use admt_cli::generate::{cmd_generate, GenerateArgs};
use admt_cli::train::cmd_train;
use admt_cli::CliResult;
use admt_core::data::Role;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "admt", version, about = "Dual-teacher semi-supervised segmentation on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (PGM images and masks plus manifest.json).
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 250)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0.05)]
        labeled_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one configuration and evaluate the student on the test split.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: Role,
        /// Role assignment from a training run (`split.json`).
        #[arg(long)]
        roles: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the mode grid (plus configured sweeps) over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Generate {
            out,
            n,
            size,
            classes,
            labeled_fraction,
            seed,
        } => {
            let args = GenerateArgs {
                n,
                size,
                classes,
                labeled_fraction,
                seed,
            };
            let manifest = cmd_generate(&args, &out)?;
            println!("wrote {}", manifest.display());
        }
        Command::Train { config, out, seed } => {
            let outcome = cmd_train(&config, &out, seed)?;
            println!("mean test dice {:.2}", outcome.report.mean_dice());
        }
        Command::Eval {
            checkpoint,
            dataset,
            split,
            roles,
            out,
        } => {
            let report = cmd_eval(&checkpoint, &dataset, split, roles.as_deref(), &out)?;
            println!("mean dice {:.2} over {} samples", report.mean_dice(), report.samples.len());
        }
        Command::Ablate { config, out, seed } => {
            let outcome = cmd_ablate(&config, &out, seed)?;
            for cell in &outcome.cells {
                match outcome.mean_dice(&cell.label) {
                    Some(d) => println!("{:<24} {d:.2}", cell.label),
                    None => println!("{:<24} failed", cell.label),
                }
            }
        }
    }
    Ok(())
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
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
