mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;

/// Bad flags, config values or paths the user supplied. Exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Malformed or mismatched input data. Exit code 2.
#[derive(Debug)]
pub struct DataError(pub String);

impl std::fmt::Display for DataError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for DataError {}

#[derive(Debug, Parser)]
#[command(name = "dialogem", version, about = "Latent-addressee EM pre-training for multi-party dialogue generation")]
struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Global seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override any config key, e.g. `--set em.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct OutArg {
    /// Run directory receiving every output file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataArg {
    /// Directory holding train.jsonl, valid.jsonl and test.jsonl.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Defaults to vocab.txt in the run directory above the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a planted-addressee corpus and its train/valid/test split.
    Synth {
        #[command(flatten)]
        out: OutArg,
        #[arg(long)]
        n_dialogues: Option<usize>,
        #[arg(long)]
        copy_strength: Option<f64>,
    },
    /// EM pre-training with latent addressees (PO). Resumes an interrupted run.
    TrainEm {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        out: OutArg,
        /// Number of EM iterations after the initializer-only iteration 0.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Supervised training on gold addressees: FO, or PF with --init.
    Finetune {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        out: OutArg,
        /// Start from this checkpoint instead of a fresh model.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Vocabulary for a fresh model; built from the training split if absent.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Zero all addressee flags (the baseline without addressee embeddings).
        #[arg(long)]
        no_addressee: bool,
    },
    /// Score a checkpoint, or a predictions file, against a labeled split.
    Eval {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        out: OutArg,
        #[command(flatten)]
        model: ModelArgs,
        /// JSONL rows with `dialogue_id`, `t` and `response` and/or `z`.
        #[arg(long, conflicts_with = "checkpoint")]
        predictions: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        no_addressee: bool,
    },
    /// Decode one response per instance of a split into predictions.jsonl.
    Generate {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        out: OutArg,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        no_addressee: bool,
    },
    /// Predict the addressee of every turn t >= 2 of a transcript.
    Parse {
        #[command(flatten)]
        out: OutArg,
        #[command(flatten)]
        model: ModelArgs,
        /// Transcript JSONL; addressees may be null.
        #[arg(long)]
        input: PathBuf,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if cause.is::<DataError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<dialogem::Error>() {
            return if e.is_numeric() {
                3
            } else if e.is_config() {
                1
            } else {
                2
            };
        }
    }
    2
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = RunConfig::resolve(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::Synth {
            out,
            n_dialogues,
            copy_strength,
        } => {
            cfg.paths.out = out.out.or(cfg.paths.out);
            if let Some(n) = n_dialogues {
                cfg.synth.n_dialogues = n;
            }
            if let Some(c) = copy_strength {
                cfg.synth.copy_strength = c;
            }
            commands::synth(&cfg)
        }
        Command::TrainEm {
            data,
            out,
            iterations,
        } => {
            cfg.paths.data = data.data.or(cfg.paths.data);
            cfg.paths.out = out.out.or(cfg.paths.out);
            if let Some(n) = iterations {
                cfg.em.iterations = n;
            }
            commands::train_em(&cfg)
        }
        Command::Finetune {
            data,
            out,
            init,
            vocab,
            no_addressee,
        } => {
            cfg.paths.data = data.data.or(cfg.paths.data);
            cfg.paths.out = out.out.or(cfg.paths.out);
            cfg.paths.checkpoint = init.or(cfg.paths.checkpoint);
            cfg.paths.vocab = vocab.or(cfg.paths.vocab);
            commands::finetune(&cfg, no_addressee)
        }
        Command::Eval {
            data,
            out,
            model,
            predictions,
            split,
            no_addressee,
        } => {
            cfg.paths.data = data.data.or(cfg.paths.data);
            cfg.paths.out = out.out.or(cfg.paths.out);
            apply_model_args(&mut cfg, model);
            commands::eval(&cfg, predictions.as_deref(), &split, no_addressee)
        }
        Command::Generate {
            data,
            out,
            model,
            split,
            no_addressee,
        } => {
            cfg.paths.data = data.data.or(cfg.paths.data);
            cfg.paths.out = out.out.or(cfg.paths.out);
            apply_model_args(&mut cfg, model);
            commands::generate(&cfg, &split, no_addressee)
        }
        Command::Parse { out, model, input } => {
            cfg.paths.out = out.out.or(cfg.paths.out);
            apply_model_args(&mut cfg, model);
            commands::parse(&cfg, &input)
        }
    }
}

fn apply_model_args(cfg: &mut RunConfig, model: ModelArgs) {
    cfg.paths.checkpoint = model.checkpoint.or(cfg.paths.checkpoint.take());
    cfg.paths.vocab = model.vocab.or(cfg.paths.vocab.take());
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
