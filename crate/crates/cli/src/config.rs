//! Experiment configuration: one TOML file for every command.
//!
//! Precedence is file < preset < flags. Relative data paths are resolved
//! against the directory of the config file; the output directory given on
//! the command line is resolved against the working directory.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use rerank_core::encoder::EncoderConfig;
use rerank_core::evalkit::Metric;
use rerank_core::ltr::HeadKind;
use rerank_core::segmentation::{SegmentConfig, DEFAULT_ATTENTION_SIZE};
use rerank_core::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root of every random choice; replaces the encoder and train seeds.
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub retrieval: RetrievalConfig,
    pub vocab: VocabConfig,
    pub model: ModelConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    /// Absent means whole passages truncated to `train.seq_len`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<SegmentConfig>,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub queries: PathBuf,
    pub passages: PathBuf,
    pub qrels: PathBuf,
    /// First-stage run to train and re-rank from; defaults to the output of `retrieve`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidates: Option<PathBuf>,
    /// Minimum grade counted as relevant.
    pub positivity_threshold: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub k: usize,
    pub k1: f64,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub max_size: usize,
    pub min_freq: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub head: HeadKind,
    pub attention_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub folds: usize,
    pub metrics: Vec<String>,
    /// Put a gold passage into the top k of every list before re-ranking.
    pub inject_gold: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out: PathBuf::from("out"),
            data: DataConfig::default(),
            retrieval: RetrievalConfig::default(),
            vocab: VocabConfig::default(),
            model: ModelConfig::default(),
            encoder: EncoderConfig {
                max_seq_len: 256,
                ..EncoderConfig::default()
            },
            train: TrainConfig::default(),
            segmentation: None,
            eval: EvalConfig::default(),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            queries: PathBuf::from("queries.jsonl"),
            passages: PathBuf::from("passages.jsonl"),
            qrels: PathBuf::from("qrels.tsv"),
            candidates: None,
            positivity_threshold: 1,
        }
    }
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k: 10,
            k1: rerank_core::retrieval::DEFAULT_K1,
            b: rerank_core::retrieval::DEFAULT_B,
        }
    }
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            max_size: 8192,
            min_freq: 1,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            head: HeadKind::Bertlets,
            attention_size: DEFAULT_ATTENTION_SIZE,
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            folds: 5,
            metrics: Metric::ALL.iter().map(|m| m.label().to_string()).collect(),
            inject_gold: false,
        }
    }
}

/// Dataset-specific first-stage depth and negative caps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// k = 10, two negatives per positive.
    Nfl6,
    /// k = 100, every retrieved negative.
    Webap,
    /// k = 100, five negatives per positive.
    Wikipassageqa,
}

impl Preset {
    pub fn apply(self, cfg: &mut ExperimentConfig) {
        let (k, cap) = match self {
            Preset::Nfl6 => (10, Some(2)),
            Preset::Webap => (100, None),
            Preset::Wikipassageqa => (100, Some(5)),
        };
        cfg.retrieval.k = k;
        cfg.train.neg_per_pos_cap = cap;
    }
}

/// Overrides that apply to every command.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub preset: Option<Preset>,
}

impl ExperimentConfig {
    /// Reads `path` (or starts from defaults) and applies the overrides.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("cannot read config {}", p.display()))?;
                let mut cfg: ExperimentConfig = toml::from_str(&text)
                    .with_context(|| format!("invalid config {}", p.display()))?;
                let base = p.parent().unwrap_or(Path::new(""));
                cfg.rebase(base);
                cfg
            }
            None => ExperimentConfig::default(),
        };
        if let Some(p) = overrides.preset {
            p.apply(&mut cfg);
        }
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(o) = &overrides.out {
            cfg.out = o.clone();
        }
        cfg.encoder.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.out);
        join(&mut self.data.queries);
        join(&mut self.data.passages);
        join(&mut self.data.qrels);
        if let Some(c) = &mut self.data.candidates {
            join(c);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.retrieval.k == 0 {
            bail!("retrieval.k must be at least 1");
        }
        if self.eval.folds < 2 {
            bail!("eval.folds must be at least 2");
        }
        if self.model.attention_size == 0 {
            bail!("model.attention_size must be at least 1");
        }
        self.metrics()?;
        self.encoder.validate()?;
        self.train.validate(self.encoder.max_seq_len)?;
        Ok(())
    }

    pub fn metrics(&self) -> Result<Vec<Metric>> {
        if self.eval.metrics.is_empty() {
            bail!("eval.metrics is empty");
        }
        self.eval
            .metrics
            .iter()
            .map(|m| m.parse::<Metric>().map_err(Into::into))
            .collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// The first-stage run consumed by training and re-ranking.
    pub fn candidates_path(&self) -> PathBuf {
        self.data
            .candidates
            .clone()
            .unwrap_or_else(|| self.out.join(crate::CANDIDATES_FILE))
    }
}
