use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pseudolabel::filtering::FilterMode;

mod commands;

#[derive(Debug, Parser)]
#[command(name = "pseudolabel", version, about = "Pseudo-label scoring, filtering, correction and training toolkit")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Seed for every random choice a command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// `decoupled` (dual threshold) or `coupled` (single score threshold).
    #[arg(long, global = true)]
    pub filter_mode: Option<FilterMode>,
    #[arg(long, global = true)]
    pub mask_threshold: Option<f64>,
    #[arg(long, global = true)]
    pub class_threshold: Option<f64>,
    #[arg(long, global = true)]
    pub coupled_threshold: Option<f64>,
    /// Weight of the unsupervised loss.
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    #[arg(long, global = true)]
    pub ema_alpha: Option<f64>,
    #[arg(long, global = true, default_value = ".")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-instance quality scores as CSV.
    Score {
        predictions: PathBuf,
    },
    /// Keep or reject instances, with reasons.
    Filter {
        predictions: PathBuf,
    },
    /// Fuse teacher and external class distributions.
    Correct(commands::CorrectArgs),
    /// Supervised and/or uncertainty-weighted unsupervised loss.
    Loss(commands::LossArgs),
    /// Finite-difference check of the uncertainty-weighted mask loss gradient.
    Gradcheck(commands::GradcheckArgs),
    /// Hungarian matching of student predictions to targets.
    Match(commands::TargetArgs),
    /// Synthetic scenes with ground truth and noisy predictions.
    Simulate {
        config: Option<PathBuf>,
    },
    /// Burn-in plus teacher-student training on the synthetic benchmark.
    Train(commands::TrainArgs),
    /// Score/IoU table, confusion matrix, error types and AP.
    Analyze(commands::AnalyzeArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let g = &cli.global;
    let result = match cli.command {
        Command::Score { predictions } => commands::score(g, &predictions),
        Command::Filter { predictions } => commands::filter(g, &predictions),
        Command::Correct(args) => commands::correct(g, &args),
        Command::Loss(args) => commands::loss(g, &args),
        Command::Gradcheck(args) => commands::gradcheck(g, &args),
        Command::Match(args) => commands::matching(g, &args),
        Command::Simulate { config } => commands::simulate(g, config.as_deref()),
        Command::Train(args) => commands::train(g, &args),
        Command::Analyze(args) => commands::analyze(g, &args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_numerical(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn is_numerical(e: &anyhow::Error) -> bool {
    e.chain()
        .any(|c| c.downcast_ref::<pseudolabel::Error>().is_some_and(|e| e.is_numerical()))
}
