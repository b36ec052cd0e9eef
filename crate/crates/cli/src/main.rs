mod commands;
mod run_all;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Evidence-aware inferential text generation.
#[derive(Debug, Parser)]
#[command(name = "eviq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration sources shared by every subcommand. Precedence is
/// flags > `--config` file > built-in defaults.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Seed for every random stream of the run.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Training records (JSON lines).
    #[arg(long)]
    pub data: PathBuf,
    /// Development records used for early stopping.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Output checkpoint file.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from `--out` if it holds a checkpoint of this stage.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a BM25 index from a corpus with one paragraph per line.
    BuildIndex {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print the paragraphs retrieved for an event, one `score<TAB>doc<TAB>text` line each.
    Retrieve {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        event: String,
        /// Paragraphs to retrieve; defaults to `retrieval.k`.
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write a synthetic planted-cluster dataset and corpus.
    MakeToyData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 300)]
        events: usize,
        #[arg(long, default_value_t = 4)]
        clusters: usize,
        /// Hidden clusters per event.
        #[arg(long, default_value_t = 1)]
        aspects: usize,
        /// Inference dimensions per event.
        #[arg(long, default_value_t = 1)]
        dimensions: usize,
        /// Distractor paragraphs per event.
        #[arg(long, default_value_t = 1)]
        distractors: usize,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Stage 1: train the latent codebook with its encoder and decoder.
    TrainVqvae {
        #[command(flatten)]
        train: TrainArgs,
        /// Index whose paragraphs join the vocabulary.
        #[arg(long)]
        index: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Stage 2: fit the prior network to the empirical code distribution.
    FitPrior {
        #[command(flatten)]
        train: TrainArgs,
        /// Stage-1 checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Stage 3: train the evidence encoder and generator.
    TrainDecoder {
        #[command(flatten)]
        train: TrainArgs,
        /// Stage-2 checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate ranked inferences for one event.
    Generate {
        /// Stage-3 checkpoint file or run directory.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        event: String,
        /// Dimension tag, e.g. xIntent.
        #[arg(long, alias = "dimension")]
        dim: String,
        /// Candidates to return and beam width per (code, evidence) pair.
        #[arg(long)]
        beams: Option<usize>,
        /// Latent codes drawn from the prior.
        #[arg(long)]
        samples: Option<usize>,
        /// Beam scoring: none or mean.
        #[arg(long)]
        length_norm: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score generations against gold inferences and write a report.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// Stage-3 checkpoint file or run directory.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write per-code inference token frequencies as JSON lines.
    InspectCodebook {
        /// Checkpoint file (stage 1 or later) or run directory.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Index, train all stages and evaluate, skipping up-to-date stages.
    RunAll {
        /// Directory with train.jsonl, dev.jsonl and corpus.txt.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Split to evaluate on: dev or test.
        #[arg(long, default_value = "dev")]
        eval_split: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

/// Exit code for a failed command: 2 for usage and configuration errors,
/// 1 for everything else.
fn exit_code(e: &anyhow::Error) -> u8 {
    let usage = e.chain().any(|c| {
        matches!(
            c.downcast_ref::<eviq_core::Error>(),
            Some(eviq_core::Error::Config(_) | eviq_core::Error::UnknownDimension { .. })
        )
    });
    if usage {
        2
    } else {
        1
    }
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, rec| writeln!(buf, "level={} {}", rec.level().as_str().to_lowercase(), rec.args()))
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    init_logging();
    let result = match cli.command {
        Command::BuildIndex { corpus, out, cfg } => commands::build_index(&cfg, &corpus, &out),
        Command::Retrieve { index, event, k, cfg } => commands::retrieve(&cfg, &index, &event, k),
        Command::MakeToyData { out, events, clusters, aspects, dimensions, distractors, cfg } => {
            commands::make_toy_data(&cfg, &out, events, clusters, aspects, dimensions, distractors)
        }
        Command::TrainVqvae { train, index, cfg } => commands::train_vqvae(&cfg, &train, index.as_deref()),
        Command::FitPrior { train, ckpt, cfg } => commands::fit_prior(&cfg, &train, &ckpt),
        Command::TrainDecoder { train, ckpt, index, cfg } => commands::train_decoder(&cfg, &train, &ckpt, &index),
        Command::Generate { ckpt, index, event, dim, beams, samples, length_norm, mut cfg } => {
            // These flags are shorthands for `--set generate.*` and share its precedence.
            cfg.set.extend(beams.map(|v| format!("generate.beams={v}")));
            cfg.set.extend(samples.map(|v| format!("generate.samples={v}")));
            cfg.set.extend(length_norm.map(|v| format!("generate.length_norm={v}")));
            commands::generate(&cfg, &ckpt, &index, &event, &dim)
        }
        Command::Evaluate { data, ckpt, index, out, cfg } => commands::evaluate(&cfg, &data, &ckpt, &index, &out),
        Command::InspectCodebook { ckpt, data, out, cfg } => commands::inspect_codebook(&cfg, &ckpt, &data, &out),
        Command::RunAll { data, out, eval_split, cfg } => run_all::run_all(&cfg, &data, &out, &eval_split),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("event=failed error={:?}", format!("{e:#}"));
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
