mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{EvalArgs, SubsetsArgs, TopicsArgs, TrainArgs};

#[derive(Parser)]
#[command(name = "topicvae", version, about = "Stick-breaking neural topic models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; overrides `out_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides `seed` in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write coverage.csv and sparsity.csv.
        #[arg(long)]
        curves: bool,
    },
    /// Score checkpoints on a corpus; several checkpoints are averaged.
    Eval {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        /// Defaults to the vocabulary recorded in the checkpoint.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// NPMI reference corpus; defaults to the recorded training corpus.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// When given, its hash must match the checkpoint's.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to the directory of the first checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Noise draws per document for perplexity.
        #[arg(long, default_value_t = 1)]
        samples: usize,
        #[arg(long)]
        curves: bool,
    },
    /// Print the top words of every topic.
    Topics {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        top: usize,
        /// Also write topics.txt here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the hyper-prior variant on nested class subsets.
    Subsets {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated class counts, e.g. 1,2,5,10,20.
        #[arg(long, value_delimiter = ',', required = true)]
        classes: Vec<usize>,
        /// One label per training document; defaults to the labels in the corpus file.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cli: Cli) -> error::Result<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            seed,
            curves,
        } => {
            let dir = commands::train(TrainArgs {
                config: &config,
                out: out.as_deref(),
                seed,
                curves,
            })?;
            println!("{}", dir.display());
        }
        Command::Eval {
            checkpoints,
            corpus,
            vocab,
            reference,
            config,
            out,
            seed,
            samples,
            curves,
        } => {
            let dir = commands::eval(EvalArgs {
                checkpoints: &checkpoints,
                corpus: &corpus,
                vocab: vocab.as_deref(),
                reference: reference.as_deref(),
                config: config.as_deref(),
                out: out.as_deref(),
                seed,
                samples,
                curves,
            })?;
            println!("{}", dir.join("report.json").display());
        }
        Command::Topics {
            checkpoint,
            vocab,
            top,
            out,
        } => {
            let text = commands::topics(TopicsArgs {
                checkpoint: &checkpoint,
                vocab: vocab.as_deref(),
                top,
                out: out.as_deref(),
            })?;
            print!("{text}");
        }
        Command::Subsets {
            config,
            classes,
            labels,
            out,
            seed,
        } => {
            let summary = commands::subsets(SubsetsArgs {
                config: &config,
                classes: &classes,
                labels: labels.as_deref(),
                out: out.as_deref(),
                seed,
            })?;
            println!("classes,gamma1,gamma2,e_alpha,topics_90");
            for r in &summary.rows {
                println!(
                    "{},{:.4},{:.4},{:.4},{}",
                    r.classes, r.gamma1, r.gamma2, r.e_alpha, r.topics_90
                );
            }
            let flag = |b: bool| if b { "pass" } else { "fail" };
            println!(
                "E[alpha] increasing with class count: {}",
                flag(summary.e_alpha_increasing)
            );
            println!(
                "90% coverage topics increasing with class count: {}",
                flag(summary.coverage_increasing)
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
