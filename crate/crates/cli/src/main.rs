use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use entlab_cli::{commands, config, Failure};

#[derive(Parser)]
#[command(
    name = "entlab",
    about = "Experiments on test-time adaptation of a toy sequence recognizer",
    version
)]
struct Cli {
    /// Experiment config (JSON document).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config value, `dotted.path=json` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Worker threads for per-speaker stages; output is identical for any N.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus into paths.corpus_dir.
    GenCorpus,
    /// Train the base recognizer and write the checkpoint plus curve TSV.
    Train {
        /// Continue a finished run's checkpoint up to train.steps.
        #[arg(long)]
        resume: bool,
    },
    /// Run the adaptation grid over all test speakers.
    Adapt,
    /// Decode the test split with the unadapted checkpoint and report WER.
    Evaluate,
    /// Emit per-figure CSV data files from a summary TSV.
    Report {
        /// Summary TSV to read (default: paths.out_dir/summary.tsv).
        #[arg(long)]
        summary: Option<PathBuf>,
        /// Extra labeled summaries for the ablation table, `label=path`
        /// (repeatable).
        #[arg(long = "ablation", value_name = "LABEL=PATH")]
        ablations: Vec<String>,
    },
    /// Run the full invariant suite; nonzero exit on any failure.
    Selfcheck {
        /// Deliberately damage one tape op's gradient (negative control).
        #[arg(long)]
        corrupt_op: Option<String>,
        #[arg(long, default_value_t = 17)]
        seed: u64,
    },
}

fn need_config(cli: &Cli) -> Result<config::ExperimentConfig, Failure> {
    let path = cli.config.as_deref().ok_or_else(|| {
        Failure::Config("this command needs --config <file>".to_string())
    })?;
    config::load_config(path, &cli.set)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::GenCorpus => commands::gen_corpus(&need_config(cli)?),
        Command::Train { resume } => commands::train(&need_config(cli)?, *resume),
        Command::Adapt => commands::adapt(&need_config(cli)?, cli.jobs),
        Command::Evaluate => commands::evaluate(&need_config(cli)?),
        Command::Report { summary, ablations } => {
            let mut pairs = Vec::with_capacity(ablations.len());
            for spec in ablations {
                let (label, path) = spec.split_once('=').ok_or_else(|| {
                    Failure::Config(format!("ablation '{spec}' is not label=path"))
                })?;
                pairs.push((label.to_string(), PathBuf::from(path)));
            }
            commands::report(&need_config(cli)?, summary.as_deref(), &pairs)
        }
        Command::Selfcheck { corrupt_op, seed } => {
            commands::selfcheck(*seed, corrupt_op.clone())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.render());
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
