use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use log::{info, warn};

use rerank_core::checkpoint;
use rerank_core::corpus::{read_passages, read_queries, split_folds, Dataset};
use rerank_core::evalkit::{
    cross_validate, evaluate_run, format_table, inject_gold, read_run, resolve_run, write_run, RankedList,
};
use rerank_core::model::RankModel;
use rerank_core::retrieval::{Candidates, InvertedIndex};
use rerank_core::segmentation::{Aggregator, AttentionPoolParams, SegmentConfig};
use rerank_core::tokenizer::Vocabulary;
use rerank_core::train::{build_training_units, rank, train, TrainState, TrainingUnit};

use crate::config::ExperimentConfig;
use crate::manifest::Manifest;
use crate::*;

/// Output files of one command. All are claimed before any work starts, so a
/// refused overwrite leaves the directory untouched.
struct Outputs {
    dir: PathBuf,
    command: &'static str,
    names: Vec<String>,
    config: String,
}

impl Outputs {
    fn claim(cfg: &ExperimentConfig, command: &'static str, force: bool, files: &[&str]) -> Result<Self> {
        let dir = cfg.out.clone();
        let mut names: Vec<String> = files.iter().map(|f| f.to_string()).collect();
        names.push(format!("{command}.config.toml"));
        if !force {
            for n in &names {
                let p = dir.join(n);
                if p.exists() {
                    bail!("refusing to overwrite {} (pass --force)", p.display());
                }
            }
        }
        std::fs::create_dir_all(&dir)
            .with_context(|| format!("cannot create output directory {}", dir.display()))?;
        Ok(Outputs {
            dir,
            command,
            names,
            config: cfg.to_toml()?,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Echoes the effective config and records every output in the manifest.
    fn finish(self) -> Result<()> {
        let path = self.dir.join(format!("{}.config.toml", self.command));
        std::fs::write(&path, &self.config).with_context(|| format!("cannot write {}", path.display()))?;
        Manifest::record(&self.dir, self.command, &self.names)
    }
}

pub fn dispatch(mut cfg: ExperimentConfig, force: bool, command: Command) -> Result<()> {
    let name = command.name();
    match command {
        Command::Index => index(&cfg, force),
        Command::Retrieve { queries, k } => {
            if let Some(k) = k {
                cfg.retrieval.k = k;
            }
            cfg.validate()?;
            retrieve(&cfg, force, &queries)
        }
        Command::BuildExamples { head, candidates } => {
            if candidates.is_some() {
                cfg.data.candidates = candidates;
            }
            if let Some(h) = head {
                cfg.model.head = h;
            }
            build_examples(&cfg, force)
        }
        Command::Train {
            candidates,
            head,
            epochs,
            seg,
            resume,
        } => {
            if let Some(h) = head {
                cfg.model.head = h;
            }
            if candidates.is_some() {
                cfg.data.candidates = candidates;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if seg.is_some() {
                cfg.segmentation = seg;
            }
            cfg.validate()?;
            train_cmd(&cfg, force, resume.as_deref())
        }
        Command::Rerank {
            candidates,
            checkpoint,
            vocab,
            seg,
            inject_gold,
        } => {
            if seg.is_some() {
                cfg.segmentation = seg;
            }
            if candidates.is_some() {
                cfg.data.candidates = candidates;
            }
            if inject_gold {
                cfg.eval.inject_gold = true;
            }
            rerank(&cfg, force, checkpoint, vocab, seg)
        }
        Command::Eval { run, metrics, label } => {
            if !metrics.is_empty() {
                cfg.eval.metrics = metrics.iter().map(|m| m.label().to_string()).collect();
            }
            eval(&cfg, force, &run, label)
        }
        Command::Sweep { seq_lens, metrics } => {
            if !metrics.is_empty() {
                cfg.eval.metrics = metrics.iter().map(|m| m.label().to_string()).collect();
            }
            sweep(&cfg, force, &seq_lens)
        }
    }
    .with_context(|| format!("{name} failed"))
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let d = &cfg.data;
    Ok(Dataset::load(&d.queries, &d.passages, &d.qrels)?.with_positivity_threshold(d.positivity_threshold))
}

/// Reads a first-stage run, rejecting ids the dataset does not know.
fn load_candidates(path: &Path, dataset: &Dataset) -> Result<Vec<Candidates>> {
    let run = read_run(path)?;
    let unknown_q: Vec<&str> = run
        .iter()
        .map(|(q, _)| q.as_str())
        .filter(|q| dataset.query(q).is_none())
        .collect();
    ensure!(
        unknown_q.is_empty(),
        "{} references unknown query ids: {}",
        path.display(),
        unknown_q.join(", ")
    );
    let unknown_p: BTreeSet<&str> = run
        .iter()
        .flat_map(|(_, e)| e.iter().map(|(p, _)| p.as_str()))
        .filter(|p| dataset.passage(p).is_none())
        .collect();
    ensure!(
        unknown_p.is_empty(),
        "{} references unknown passage ids: {}",
        path.display(),
        unknown_p.into_iter().collect::<Vec<_>>().join(", ")
    );
    Ok(run
        .into_iter()
        .map(|(query_id, ranked)| Candidates { query_id, ranked })
        .collect())
}

fn build_vocab(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<Vocabulary> {
    let texts = dataset
        .queries()
        .iter()
        .map(|q| q.text.as_str())
        .chain(dataset.passages().iter().map(|p| p.text.as_str()));
    Ok(Vocabulary::build(texts, cfg.vocab.max_size, cfg.vocab.min_freq)?)
}

fn fresh_model(
    cfg: &ExperimentConfig,
    vocab: &Vocabulary,
    seg: Option<SegmentConfig>,
) -> rerank_core::Result<RankModel> {
    let mut enc = cfg.encoder.clone();
    enc.vocab_size = vocab.len();
    RankModel::new(enc, cfg.model.head, seg, cfg.model.attention_size)
}

/// Candidate lists with a gold passage forced into the top `k`.
fn with_gold(cands: &[Candidates], dataset: &Dataset, k: usize) -> Result<Vec<Candidates>> {
    cands
        .iter()
        .map(|c| {
            let list = RankedList::from_scored(&c.query_id, &c.ranked, dataset)?;
            let injected = inject_gold(&list, &dataset.relevant_ids(&c.query_id), k)?;
            Ok(Candidates {
                query_id: c.query_id.clone(),
                ranked: injected
                    .entries
                    .into_iter()
                    .map(|e| (e.passage_id, e.score))
                    .collect(),
            })
        })
        .collect()
}

fn index(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let out = Outputs::claim(cfg, "index", force, &[INDEX_FILE])?;
    let passages = read_passages(&cfg.data.passages)?;
    let index = InvertedIndex::build(&passages, cfg.retrieval.k1, cfg.retrieval.b)?;
    let path = out.path(INDEX_FILE);
    index.save(&path)?;
    InvertedIndex::load(&path)?;
    info!("indexed {} passages into {}", index.num_docs(), path.display());
    out.finish()
}

fn retrieve(cfg: &ExperimentConfig, force: bool, only: &[String]) -> Result<()> {
    let index_path = cfg.out.join(INDEX_FILE);
    let index = InvertedIndex::load(&index_path).context("run `index` first")?;
    let mut queries = read_queries(&cfg.data.queries)?;
    if !only.is_empty() {
        let known: BTreeSet<&str> = queries.iter().map(|q| q.id.as_str()).collect();
        let unknown: Vec<&str> = only
            .iter()
            .map(String::as_str)
            .filter(|q| !known.contains(q))
            .collect();
        ensure!(unknown.is_empty(), "unknown query ids: {}", unknown.join(", "));
        let wanted: BTreeSet<&str> = only.iter().map(String::as_str).collect();
        queries.retain(|q| wanted.contains(q.id.as_str()));
    }
    let out = Outputs::claim(cfg, "retrieve", force, &[CANDIDATES_FILE])?;
    let mut lists = Vec::with_capacity(queries.len());
    for q in &queries {
        let c = index.top_k(q, cfg.retrieval.k);
        if c.ranked.is_empty() {
            warn!("query {} matched no passages", q.id);
        }
        lists.push((c.query_id, c.ranked));
    }
    let path = out.path(CANDIDATES_FILE);
    write_run(&path, &lists, "bm25")?;
    read_run(&path)?;
    info!("retrieved top {} for {} queries into {}", cfg.retrieval.k, lists.len(), path.display());
    out.finish()
}

fn build_examples(cfg: &ExperimentConfig, force: bool) -> Result<()> {
    let dataset = load_dataset(cfg)?;
    let cands = load_candidates(&cfg.candidates_path(), &dataset)?;
    let out = Outputs::claim(cfg, "build-examples", force, &[EXAMPLES_FILE])?;
    let units = build_training_units(
        &dataset,
        &cands,
        cfg.model.head,
        cfg.train.neg_per_pos_cap,
        cfg.seed,
    );
    report_skipped(&cands, &units);
    let mut text = String::new();
    if cfg.model.head.is_pairwise() {
        text.push_str("query_id\tpositive_id\tnegative_id\n");
    } else {
        text.push_str("query_id\tpassage_id\tlabel\n");
    }
    for u in &units {
        match u {
            TrainingUnit::Pair(t) => writeln!(
                text,
                "{}\t{}\t{}",
                t.query_id, t.positive_passage_id, t.negative_passage_id
            ),
            TrainingUnit::Single(e) => writeln!(text, "{}\t{}\t{}", e.query_id, e.passage_id, e.label),
        }
        .expect("writing to a String");
    }
    let path = out.path(EXAMPLES_FILE);
    std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
    info!("wrote {} {} examples to {}", units.len(), cfg.model.head, path.display());
    out.finish()
}

fn report_skipped(cands: &[Candidates], units: &[TrainingUnit]) {
    let used: BTreeSet<&str> = units.iter().map(|u| u.query_id()).collect();
    let skipped = cands.iter().filter(|c| !used.contains(c.query_id.as_str())).count();
    if skipped > 0 {
        warn!("{skipped} queries add no training examples (no retrieved positive, or nothing to pair it with)");
    }
}

fn train_cmd(cfg: &ExperimentConfig, force: bool, resume: Option<&Path>) -> Result<()> {
    let dataset = load_dataset(cfg)?;
    let cands = load_candidates(&cfg.candidates_path(), &dataset)?;
    let (mut model, mut state, vocab) = match resume {
        Some(path) => {
            let (model, state) = checkpoint::load(path)?;
            let state = state.with_context(|| {
                format!("{} has no optimizer state to resume from", path.display())
            })?;
            let vocab = Vocabulary::load(path.with_file_name(VOCAB_FILE))?;
            if model.head_kind() != cfg.model.head {
                warn!("resuming a {} checkpoint; ignoring head {}", model.head_kind(), cfg.model.head);
            }
            (model, state, vocab)
        }
        None => {
            let vocab = build_vocab(cfg, &dataset)?;
            let model = fresh_model(cfg, &vocab, cfg.segmentation)?;
            (model, TrainState::default(), vocab)
        }
    };
    let done = state.epochs_done;
    ensure!(
        done < cfg.train.epochs,
        "checkpoint already has {done} epochs; raise train.epochs to continue"
    );
    let out = Outputs::claim(cfg, "train", force, &[VOCAB_FILE, CHECKPOINT_FILE, LOSS_FILE])?;
    let units = build_training_units(
        &dataset,
        &cands,
        model.head_kind(),
        cfg.train.neg_per_pos_cap,
        cfg.seed,
    );
    report_skipped(&cands, &units);
    info!(
        "training {} head on {} examples, epochs {}..{}",
        model.head_kind(),
        units.len(),
        done + 1,
        cfg.train.epochs
    );
    let report = train(&mut model, &mut state, &vocab, &dataset, &units, &cfg.train)?;

    vocab.save(out.path(VOCAB_FILE))?;
    let ckpt = out.path(CHECKPOINT_FILE);
    checkpoint::save(&ckpt, &model, Some(&state))?;
    checkpoint::load(&ckpt)?;
    let mut trace = String::from("epoch\tloss\n");
    for (i, loss) in report.epoch_losses.iter().enumerate() {
        info!("epoch {}: loss {loss:.6}", done + i + 1);
        writeln!(trace, "{}\t{loss}", done + i + 1).expect("writing to a String");
    }
    let loss_path = out.path(LOSS_FILE);
    std::fs::write(&loss_path, trace).with_context(|| format!("cannot write {}", loss_path.display()))?;
    info!("{} steps; checkpoint {}", report.steps, ckpt.display());
    out.finish()
}

/// Switches `model` to segmented scoring. Attention pooling needs parameters a
/// checkpoint trained without segmentation lacks; those start fresh.
fn resegment(model: &mut RankModel, seg: SegmentConfig, cfg: &ExperimentConfig) -> Result<()> {
    model.segmentation = Some(seg);
    match seg.aggregator {
        Aggregator::Attention => {
            if model.attention.is_none() {
                warn!("checkpoint has no attention-pool parameters; using an untrained pool");
                model.attention = Some(AttentionPoolParams::init(
                    cfg.model.attention_size,
                    model.encoder.hidden_dim(),
                    cfg.seed.wrapping_add(2),
                )?);
            }
        }
        Aggregator::Max => model.attention = None,
    }
    Ok(model.validate()?)
}

fn rerank(
    cfg: &ExperimentConfig,
    force: bool,
    ckpt: Option<PathBuf>,
    vocab: Option<PathBuf>,
    seg: Option<SegmentConfig>,
) -> Result<()> {
    let ckpt = ckpt.unwrap_or_else(|| cfg.out.join(CHECKPOINT_FILE));
    let (mut model, _) = checkpoint::load(&ckpt)?;
    let vocab = Vocabulary::load(vocab.unwrap_or_else(|| ckpt.with_file_name(VOCAB_FILE)))?;
    if let Some(s) = seg {
        resegment(&mut model, s, cfg)?;
    }
    if model.segmentation.is_none() {
        ensure!(
            cfg.train.seq_len <= model.encoder.config.max_seq_len,
            "seq_len {} exceeds the checkpoint's max_seq_len {}",
            cfg.train.seq_len,
            model.encoder.config.max_seq_len
        );
    }
    let dataset = load_dataset(cfg)?;
    let mut cands = load_candidates(&cfg.candidates_path(), &dataset)?;
    if cfg.eval.inject_gold {
        cands = with_gold(&cands, &dataset, cfg.retrieval.k)?;
    }
    let out = Outputs::claim(cfg, "rerank", force, &[RERANK_FILE])?;
    let lists = cands
        .iter()
        .map(|c| Ok((c.query_id.clone(), rank(&model, &vocab, &dataset, c, cfg.train.seq_len)?)))
        .collect::<Result<Vec<_>>>()?;
    let path = out.path(RERANK_FILE);
    let tag = match model.segmentation {
        Some(s) => format!("{}-{}x{}-{}", model.head_kind(), s.num_chunks, s.chunk_seq_len, s.aggregator),
        None => model.head_kind().to_string(),
    };
    write_run(&path, &lists, &tag)?;
    read_run(&path)?;
    info!("re-ranked {} queries into {}", lists.len(), path.display());
    out.finish()
}

fn eval(cfg: &ExperimentConfig, force: bool, run_path: &Path, label: Option<String>) -> Result<()> {
    let metrics = cfg.metrics()?;
    let dataset = load_dataset(cfg)?;
    let run = read_run(run_path)?;
    let lists = resolve_run(&run, &dataset).with_context(|| format!("in {}", run_path.display()))?;
    let out = Outputs::claim(cfg, "eval", force, &[METRICS_FILE, METRICS_JSON_FILE])?;
    let report = evaluate_run(&lists);
    if !report.excluded.is_empty() {
        warn!(
            "{} queries have no relevant passage and are excluded from MAP: {}",
            report.excluded.len(),
            report.excluded.join(", ")
        );
    }
    let label = label.unwrap_or_else(|| {
        run_path
            .file_name()
            .map_or_else(|| "run".to_string(), |n| n.to_string_lossy().into_owned())
    });
    let table = format_table(&[(label, &report)], &metrics, "run");
    std::fs::write(out.path(METRICS_FILE), &table)
        .with_context(|| format!("cannot write {}", out.path(METRICS_FILE).display()))?;
    std::fs::write(out.path(METRICS_JSON_FILE), report.to_json()? + "\n")
        .with_context(|| format!("cannot write {}", out.path(METRICS_JSON_FILE).display()))?;
    print!("{table}");
    out.finish()
}

fn sweep(cfg: &ExperimentConfig, force: bool, seq_lens: &[usize]) -> Result<()> {
    let metrics = cfg.metrics()?;
    ensure!(!seq_lens.is_empty(), "no sequence lengths to sweep");
    let max = cfg.encoder.max_seq_len;
    let mut seen = BTreeSet::new();
    for &n in seq_lens {
        ensure!(n <= max, "seq_len {n} exceeds encoder max_seq_len {max}");
        ensure!(seen.insert(n), "seq_len {n} listed twice");
        let mut t = cfg.train.clone();
        t.seq_len = n;
        t.validate(max)?;
    }
    if cfg.segmentation.is_some() {
        warn!("sweep scores whole passages; ignoring the segmentation settings");
    }
    let dataset = load_dataset(cfg)?;
    let cands: BTreeMap<String, Candidates> = match &cfg.data.candidates {
        Some(p) => load_candidates(p, &dataset)?,
        None => {
            let index = InvertedIndex::build(dataset.passages(), cfg.retrieval.k1, cfg.retrieval.b)?;
            dataset
                .queries()
                .iter()
                .map(|q| index.top_k(q, cfg.retrieval.k))
                .collect()
        }
    }
    .into_iter()
    .map(|c| (c.query_id.clone(), c))
    .collect();
    let cands = if cfg.eval.inject_gold {
        let v: Vec<Candidates> = cands.into_values().collect();
        with_gold(&v, &dataset, cfg.retrieval.k)?
            .into_iter()
            .map(|c| (c.query_id.clone(), c))
            .collect()
    } else {
        cands
    };
    let folds = split_folds(&dataset, cfg.eval.folds, cfg.seed)?;
    let vocab = build_vocab(cfg, &dataset)?;
    let out = Outputs::claim(cfg, "sweep", force, &[SWEEP_FILE])?;

    let mut reports = Vec::with_capacity(seq_lens.len());
    for &n in seq_lens {
        let mut tcfg = cfg.train.clone();
        tcfg.seq_len = n;
        let cv = cross_validate(
            &folds,
            |f, train_ids| {
                let pools: Vec<Candidates> = cands
                    .values()
                    .filter(|c| train_ids.contains(&c.query_id))
                    .cloned()
                    .collect();
                let units =
                    build_training_units(&dataset, &pools, cfg.model.head, tcfg.neg_per_pos_cap, cfg.seed);
                let mut model = fresh_model(cfg, &vocab, None)?;
                let report = train(&mut model, &mut TrainState::default(), &vocab, &dataset, &units, &tcfg)?;
                info!(
                    "seq_len {n} fold {f}: {} examples, final loss {:.6}",
                    units.len(),
                    report.epoch_losses.last().copied().unwrap_or(f64::NAN)
                );
                Ok(model)
            },
            |_, model, test_ids| {
                test_ids
                    .iter()
                    .map(|q| {
                        let scored = match cands.get(*q) {
                            Some(c) => rank(model, &vocab, &dataset, c, n)?,
                            None => Vec::new(),
                        };
                        RankedList::from_scored(q, &scored, &dataset)
                    })
                    .collect()
            },
        )?;
        reports.push((n.to_string(), cv.pooled));
    }
    let rows: Vec<(String, &_)> = reports.iter().map(|(n, r)| (n.clone(), r)).collect();
    let table = format_table(&rows, &metrics, "seq_len");
    let path = out.path(SWEEP_FILE);
    std::fs::write(&path, &table).with_context(|| format!("cannot write {}", path.display()))?;
    print!("{table}");
    out.finish()
}
