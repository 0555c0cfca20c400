use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use tsd::experiment::{
    cmd_ablate, cmd_distill, cmd_report, cmd_train_teacher, ExperimentConfig, ExperimentError,
};

/// Temporal saliency distillation for time series classifiers.
#[derive(Parser)]
#[command(name = "tsd", version, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train teacher candidates and keep the best by validation AUC-PRC.
    TrainTeacher(RunArgs),
    /// Train one student per configured objective and seed, then score them.
    Distill(RunArgs),
    /// Sweep the configured ablation axis, reusing the stored teacher.
    Ablate(RunArgs),
    /// Aggregate a finished run directory into pivots, standings, and maps.
    Report {
        /// Run directory holding config.json, scores.tsv, and the teacher.
        #[arg(long)]
        out: PathBuf,
    },
}

fn effective_config(args: &RunArgs) -> Result<ExperimentConfig, ExperimentError> {
    if args.jobs == Some(0) {
        return Err(ExperimentError::Config("--jobs must be at least 1".into()));
    }
    let config = ExperimentConfig::load(&args.config)?;
    Ok(config.effective(args.out.as_deref(), args.seed))
}

fn run(cli: Cli) -> Result<(), ExperimentError> {
    match cli.command {
        Command::TrainTeacher(args) => cmd_train_teacher(&effective_config(&args)?, args.jobs),
        Command::Distill(args) => cmd_distill(&effective_config(&args)?, args.jobs),
        Command::Ablate(args) => cmd_ablate(&effective_config(&args)?, args.jobs),
        Command::Report { out } => cmd_report(&out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
