//! The library pipeline end to end on a small synthetic corpus.

use rerank_core::checkpoint;
use rerank_core::encoder::EncoderConfig;
use rerank_core::evalkit::{evaluate_run, RankedList};
use rerank_core::ltr::HeadKind;
use rerank_core::model::RankModel;
use rerank_core::params::ParamSet;
use rerank_core::retrieval::{Candidates, InvertedIndex};
use rerank_core::segmentation::{Aggregator, SegmentConfig};
use rerank_core::synthetic::{generate, SyntheticConfig, SyntheticCorpus};
use rerank_core::tokenizer::Vocabulary;
use rerank_core::train::{build_training_units, rank, train, TrainConfig, TrainReport, TrainState};

const SEQ_LEN: usize = 24;

fn corpus() -> SyntheticCorpus {
    generate(&SyntheticConfig {
        num_queries: 30,
        candidates_per_query: 5,
        query_words: 4,
        passage_words: 6,
        vocabulary_words: 30,
        max_negative_overlap: 0,
        seed: 4,
        ..SyntheticConfig::default()
    })
    .unwrap()
}

fn vocab(c: &SyntheticCorpus) -> Vocabulary {
    let texts = c
        .dataset
        .queries()
        .iter()
        .map(|q| q.text.as_str())
        .chain(c.dataset.passages().iter().map(|p| p.text.as_str()));
    Vocabulary::build(texts, 1000, 1).unwrap()
}

fn model(vocab: &Vocabulary, head: HeadKind, seg: Option<SegmentConfig>, seed: u64) -> RankModel {
    let cfg = EncoderConfig {
        num_layers: 1,
        hidden_dim: 16,
        num_heads: 2,
        ffn_dim: 32,
        vocab_size: vocab.len(),
        max_seq_len: SEQ_LEN,
        dropout_rate: 0.1,
        seed,
        ..EncoderConfig::default()
    };
    RankModel::new(cfg, head, seg, 8).unwrap()
}

fn train_cfg(epochs: usize, lr: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        learning_rate: lr,
        batch_size: 4,
        seq_len: SEQ_LEN,
        seed,
        ..TrainConfig::default()
    }
}

fn fit(m: &mut RankModel, v: &Vocabulary, c: &SyntheticCorpus, cands: &[Candidates], cfg: &TrainConfig) -> TrainReport {
    let units = build_training_units(&c.dataset, cands, m.head_kind(), None, cfg.seed);
    train(m, &mut TrainState::default(), v, &c.dataset, &units, cfg).unwrap()
}

fn p_at_1(m: &RankModel, v: &Vocabulary, c: &SyntheticCorpus) -> f64 {
    let lists: Vec<RankedList> = c
        .candidates
        .iter()
        .map(|cand| {
            let r = rank(m, v, &c.dataset, cand, SEQ_LEN).unwrap();
            RankedList::from_scored(&cand.query_id, &r, &c.dataset).unwrap()
        })
        .collect();
    evaluate_run(&lists).p_at_1.unwrap()
}

fn flat(m: &RankModel) -> Vec<f64> {
    m.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
}

#[test]
fn training_on_bm25_candidates_lowers_the_hinge_loss() {
    let c = corpus();
    let v = vocab(&c);
    let index = InvertedIndex::build(c.dataset.passages(), 1.2, 0.75).unwrap();
    let cands: Vec<Candidates> = c.dataset.queries().iter().map(|q| index.top_k(q, 5)).collect();
    let mut m = model(&v, HeadKind::Bertlets, None, 1);
    let report = fit(&mut m, &v, &c, &cands, &train_cfg(6, 5e-3, 1));
    assert_eq!(report.epoch_losses.len(), 6);
    assert!(
        report.epoch_losses.windows(2).all(|w| w[1] < w[0]),
        "{:?}",
        report.epoch_losses
    );
}

#[test]
fn every_head_trains_and_ranks() {
    let c = corpus();
    let v = vocab(&c);
    for head in [HeadKind::Bertlets, HeadKind::PairwiseCe, HeadKind::Pointwise] {
        let mut m = model(&v, head, None, 2);
        let report = fit(&mut m, &v, &c, &c.candidates, &train_cfg(2, 1e-3, 2));
        assert!(report.epoch_losses.iter().all(|l| l.is_finite()), "{head}");
        assert!(report.steps > 0);
        let p = p_at_1(&m, &v, &c);
        assert!((0.0..=1.0).contains(&p));
    }
}

#[test]
fn segmented_model_trains_end_to_end() {
    let c = corpus();
    let v = vocab(&c);
    for aggregator in [Aggregator::Attention, Aggregator::Max] {
        let seg = SegmentConfig {
            num_chunks: 2,
            chunk_seq_len: 12,
            aggregator,
        };
        let mut m = model(&v, HeadKind::Bertlets, Some(seg), 3);
        let before = flat(&m);
        let report = fit(&mut m, &v, &c, &c.candidates, &train_cfg(2, 1e-3, 3));
        assert!(report.epoch_losses.iter().all(|l| l.is_finite()));
        assert_ne!(before, flat(&m));
    }
}

#[test]
fn checkpoint_round_trip_ranks_identically() {
    let c = corpus();
    let v = vocab(&c);
    let mut m = model(&v, HeadKind::PairwiseCe, None, 5);
    fit(&mut m, &v, &c, &c.candidates, &train_cfg(1, 1e-3, 5));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, &m, None).unwrap();
    let (back, state) = checkpoint::load(&path).unwrap();
    assert!(state.is_none());
    assert_eq!(flat(&back), flat(&m));
    for cand in &c.candidates {
        assert_eq!(
            rank(&m, &v, &c.dataset, cand, SEQ_LEN).unwrap(),
            rank(&back, &v, &c.dataset, cand, SEQ_LEN).unwrap()
        );
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let c = corpus();
    let v = vocab(&c);
    let mut m = model(&v, HeadKind::Bertlets, None, 6);
    // without dropout every epoch sees the same losses
    m.encoder.config.dropout_rate = 0.0;
    let before = flat(&m);
    let report = fit(&mut m, &v, &c, &c.candidates, &train_cfg(3, 0.0, 6));
    assert_eq!(before, flat(&m));
    let l = &report.epoch_losses;
    assert!(l.iter().all(|x| x == &l[0]), "{l:?}");
}

#[test]
fn training_is_reproducible_for_a_seed() {
    let c = corpus();
    let v = vocab(&c);
    let run = |seed: u64| {
        let mut m = model(&v, HeadKind::Pointwise, None, seed);
        fit(&mut m, &v, &c, &c.candidates, &train_cfg(2, 1e-3, seed));
        flat(&m)
    };
    assert_eq!(run(7), run(7));
    assert_ne!(run(7), run(8));
}
