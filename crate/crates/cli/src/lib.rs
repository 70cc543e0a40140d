//! `rerank`: a passage re-ranking pipeline driven by one experiment config.
//!
//! Every command writes into the output directory, echoes its effective config
//! there as `<command>.config.toml` and records the files it produced in
//! `manifest.json`. Existing outputs are only replaced with `--force`.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use rerank_core::evalkit::Metric;
use rerank_core::ltr::HeadKind;
use rerank_core::segmentation::SegmentConfig;

use crate::config::{ExperimentConfig, Overrides, Preset};

pub const INDEX_FILE: &str = "index.bm25";
pub const CANDIDATES_FILE: &str = "candidates.run";
pub const EXAMPLES_FILE: &str = "examples.tsv";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss.tsv";
pub const RERANK_FILE: &str = "rerank.run";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const METRICS_JSON_FILE: &str = "metrics.json";
pub const SWEEP_FILE: &str = "sweep.tsv";

#[derive(Debug, Parser)]
#[command(name = "rerank", version, about = "Passage re-ranking experiments")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Experiment config (TOML). Defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice; replaces the encoder and train seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// First-stage depth and negative cap of a benchmark setup.
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the BM25 index over the passages file.
    Index,
    /// Retrieve the top k passages per query into the candidates run.
    Retrieve {
        /// Restrict to these query ids (repeatable).
        #[arg(long = "query")]
        queries: Vec<String>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Write the training triplets or point-wise examples drawn from the candidates.
    BuildExamples {
        /// Ranking head: pointwise, bertlets or pairwise_ce.
        #[arg(long)]
        head: Option<HeadKind>,
        /// First-stage run; defaults to `data.candidates`, then the output of `retrieve`.
        #[arg(long)]
        candidates: Option<PathBuf>,
    },
    /// Train a re-ranker on the candidates of every query.
    Train {
        /// First-stage run; defaults to `data.candidates`, then the output of `retrieve`.
        #[arg(long)]
        candidates: Option<PathBuf>,
        /// Ranking head: pointwise, bertlets or pairwise_ce.
        #[arg(long)]
        head: Option<HeadKind>,
        /// Total number of epochs (including those already done when resuming).
        #[arg(long)]
        epochs: Option<usize>,
        /// Segment passages, e.g. `2x128` or `3x64:max`.
        #[arg(long)]
        seg: Option<SegmentConfig>,
        /// Continue from a checkpoint written by `train`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Re-score and re-sort the candidates with a trained model.
    Rerank {
        /// First-stage run; defaults to `data.candidates`, then the output of `retrieve`.
        #[arg(long)]
        candidates: Option<PathBuf>,
        /// Defaults to the checkpoint in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to `vocab.txt` next to the checkpoint.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Score with a segmented passage representation.
        #[arg(long)]
        seg: Option<SegmentConfig>,
        /// Ensure a gold passage is among the top k before re-ranking.
        #[arg(long)]
        inject_gold: bool,
    },
    /// Compute P@1, MAP and MRR of a run against the qrels.
    Eval {
        #[arg(long)]
        run: PathBuf,
        /// Metrics to report (repeatable or comma separated).
        #[arg(long = "metric", value_delimiter = ',')]
        metrics: Vec<Metric>,
        /// Row label; defaults to the run file name.
        #[arg(long)]
        label: Option<String>,
    },
    /// Cross-validated train and evaluate for each sequence length.
    Sweep {
        #[arg(long = "seq-lens", value_delimiter = ',', required = true)]
        seq_lens: Vec<usize>,
        #[arg(long = "metric", value_delimiter = ',')]
        metrics: Vec<Metric>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Index => "index",
            Command::Retrieve { .. } => "retrieve",
            Command::BuildExamples { .. } => "build-examples",
            Command::Train { .. } => "train",
            Command::Rerank { .. } => "rerank",
            Command::Eval { .. } => "eval",
            Command::Sweep { .. } => "sweep",
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let overrides = Overrides {
        seed: cli.common.seed,
        out: cli.common.out.clone(),
        preset: cli.common.preset,
    };
    let cfg = ExperimentConfig::resolve(cli.common.config.as_deref(), &overrides)?;
    commands::dispatch(cfg, cli.common.force, cli.command)
}
