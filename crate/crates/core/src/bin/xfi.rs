use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xfi_core::harness::{run_experiment, Command, Preset, RunOptions};

#[derive(Parser)]
#[command(name = "xfi", version, about = "Modality-invariant fusion experiments on synthetic multimodal data")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model with modality-invariant sampling and save its checkpoint.
    Train(Common),
    /// Evaluate a saved checkpoint on every non-empty modality subset.
    Eval(Common),
    /// Repeat train and eval across existence-probability vectors.
    Ablate(Common),
    /// Train and evaluate the four fusion variants and both baselines.
    Variants(Common),
}

#[derive(Args)]
struct Common {
    /// TOML experiment config, merged onto the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "xfi-out")]
    out: PathBuf,
    /// Base preset; wins over a `preset` key in the config.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = match cli.command {
        Cmd::Train(a) => (Command::Train, a),
        Cmd::Eval(a) => (Command::Eval, a),
        Cmd::Ablate(a) => (Command::Ablate, a),
        Cmd::Variants(a) => (Command::Variants, a),
    };
    let opts = RunOptions {
        config: args.config,
        preset: args.preset,
        seed: args.seed,
        out: args.out,
    };
    match run_experiment(command, &opts) {
        Ok(outcome) => {
            for (cell, report) in &outcome.reports {
                let name = if cell.is_empty() { &report.metadata.model } else { cell };
                println!("{name}: {} rows", report.rows.len());
            }
            println!(
                "{} finished in {:.1}s; artifacts in {}",
                command.name(),
                outcome.wall_time.as_secs_f64(),
                opts.out.display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
