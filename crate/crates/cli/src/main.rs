use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use tkgqa_cli::{cmd_ablate, cmd_eval, cmd_gen, cmd_query, cmd_train, CommonOpts, Split, TrainOpts};

#[derive(Parser)]
#[command(
    name = "tkgqa",
    about = "Temporal knowledge-graph question answering: synthetic benchmark, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Output directory for all artifacts (stable filenames).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// TOML run configuration (defaults to <out>/run_config.toml when present).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; fans out to every stage.
    #[arg(long)]
    seed: Option<u64>,
    /// Field overrides, e.g. --set qa.lambda_o=2.0 --set bench.num_quads=500.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl From<&Common> for CommonOpts {
    fn from(c: &Common) -> CommonOpts {
        CommonOpts {
            out: c.out.clone(),
            config: c.config.clone(),
            seed: c.seed,
            set: c.set.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic KG and question splits.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train KG embeddings, then the QA model; writes model.ckpt.
    Train {
        #[command(flatten)]
        common: Common,
        /// Retrain stage 1 even when a matching embeddings.ckpt exists.
        #[arg(long)]
        no_resume: bool,
        /// Sweep the λ_o × λ_c grid and keep the best dev model.
        #[arg(long)]
        sweep_lambda: bool,
    },
    /// Evaluate a checkpoint on a question split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path (defaults to <out>/model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Question split: train, dev, or test.
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Train and evaluate the cumulative feature-removal variants.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Answer a JSON-lines question file with top-k candidates.
    Query {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path (defaults to <out>/model.ckpt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// JSON-lines question file.
        #[arg(long)]
        questions: PathBuf,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Gen { common } => cmd_gen(&common.into()),
        Command::Train {
            common,
            no_resume,
            sweep_lambda,
        } => cmd_train(
            &common.into(),
            &TrainOpts {
                no_resume: *no_resume,
                sweep_lambda: *sweep_lambda,
            },
        ),
        Command::Eval {
            common,
            checkpoint,
            split,
        } => cmd_eval(&common.into(), checkpoint.as_deref(), *split),
        Command::Ablate { common } => cmd_ablate(&common.into()),
        Command::Query {
            common,
            checkpoint,
            questions,
            top_k,
        } => cmd_query(&common.into(), checkpoint.as_deref(), questions, *top_k),
    }
}
