//! `cod-lab`: dataset generation, training, alignment analysis and the
//! arm comparison matrix.

mod commands;
mod config;
mod error;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cod_lab::trainer::Arm;

use commands::Overrides;
use error::CliError;

#[derive(Parser)]
#[command(
    name = "cod-lab",
    version,
    about = "Contrastive text/graph alignment experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone, Debug, Default)]
struct TrainFlags {
    /// Training config (`key = value` lines)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// text, graph, hybrid or hybrid+cod
    #[arg(long, value_parser = parse_arm)]
    arm: Option<Arm>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl TrainFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            arm: self.arm,
            tau: self.tau,
            lambda: self.lambda,
            epochs: self.epochs,
        }
    }
}

fn parse_arm(s: &str) -> Result<Arm, String> {
    s.parse()
        .map_err(|e: cod_lab::trainer::TrainError| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/eval JSONL from a dataset spec
    Generate {
        spec: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one arm and write its record, snapshots and metrics
    Train {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Alignment curves, PCA scatters and the regime verdict of a run
    Analyze {
        run: PathBuf,
        /// Defaults to `<run>/report`
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write SVG scatter plots
        #[arg(long)]
        svg: bool,
    },
    /// Train all four arms over several seeds
    Matrix {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reasoning pattern of each S-expression in a file
    ClassifyPattern {
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// iid / compositional / zeroshot label of each test query
    LabelSplits {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { spec, seed, out } => commands::cmd_generate(&spec, seed, &out),
        Command::Train { data, flags, out } => {
            commands::cmd_train(&data, flags.config.as_ref(), &flags.overrides(), &out)
        }
        Command::Analyze { run, out, svg } => commands::cmd_analyze(&run, out.as_deref(), svg),
        Command::Matrix {
            data,
            flags,
            seeds,
            out,
        } => commands::cmd_matrix(
            &data,
            flags.config.as_ref(),
            &flags.overrides(),
            seeds,
            &out,
        ),
        Command::ClassifyPattern { input, out } => {
            commands::cmd_classify_pattern(&input, out.as_deref())
        }
        Command::LabelSplits { train, test, out } => {
            commands::cmd_label_splits(&train, &test, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            ExitCode::FAILURE
        }
    }
}
