//! Generated toy corpora where relevance is decided by query-term overlap.
//!
//! Every query has a fixed pool of candidates. Exactly one candidate contains
//! all query words; the others share at most `max_negative_overlap` of them.
//! Filler words never repeat within a passage and never come from the query.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Passage, Query};
use crate::error::{Error, Result};
use crate::retrieval::Candidates;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_queries: usize,
    pub candidates_per_query: usize,
    pub query_words: usize,
    pub passage_words: usize,
    pub vocabulary_words: usize,
    pub max_negative_overlap: usize,
    /// Prefix for query and passage ids, so several corpora can be merged.
    pub id_prefix: String,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_queries: 200,
            candidates_per_query: 10,
            query_words: 8,
            passage_words: 8,
            vocabulary_words: 24,
            max_negative_overlap: 0,
            id_prefix: String::new(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub dataset: Dataset,
    /// Candidate pools in random order with zero first-stage scores.
    pub candidates: Vec<Candidates>,
}

pub fn word(i: usize) -> String {
    format!("w{i:03}")
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    let qw = cfg.query_words;
    if qw == 0 || cfg.candidates_per_query < 2 || cfg.num_queries == 0 {
        return Err(Error::Config(
            "need query words, at least one query and two candidates per query".into(),
        ));
    }
    if cfg.max_negative_overlap >= qw {
        return Err(Error::Config(
            "max_negative_overlap must be below the number of query words".into(),
        ));
    }
    if cfg.passage_words < qw || cfg.vocabulary_words < qw + cfg.passage_words {
        return Err(Error::Config(
            "passages must hold the query and the vocabulary must exceed query + passage".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let p = &cfg.id_prefix;
    let mut queries = Vec::with_capacity(cfg.num_queries);
    let mut passages = Vec::new();
    let mut judgments = Vec::new();
    let mut candidates = Vec::with_capacity(cfg.num_queries);
    for qi in 0..cfg.num_queries {
        let qid = format!("{p}q{qi:04}");
        let picked = index::sample(&mut rng, cfg.vocabulary_words, qw).into_vec();
        let others: Vec<usize> = (0..cfg.vocabulary_words).filter(|w| !picked.contains(w)).collect();
        queries.push(Query::new(&qid, join(&picked)));

        let mut pool = Vec::with_capacity(cfg.candidates_per_query);
        for ci in 0..cfg.candidates_per_query {
            let overlap = if ci == 0 {
                qw
            } else {
                rng.gen_range(0..=cfg.max_negative_overlap)
            };
            let mut words: Vec<usize> = picked.choose_multiple(&mut rng, overlap).copied().collect();
            words.extend(others.choose_multiple(&mut rng, cfg.passage_words - overlap));
            words.shuffle(&mut rng);
            let pid = format!("{p}q{qi:04}-p{ci:02}");
            if ci == 0 {
                judgments.push((qid.clone(), pid.clone(), 1));
            }
            passages.push(Passage::new(&pid, join(&words)));
            pool.push((pid, 0.0));
        }
        pool.shuffle(&mut rng);
        candidates.push(Candidates {
            query_id: qid,
            ranked: pool,
        });
    }
    Ok(SyntheticCorpus {
        dataset: Dataset::new(queries, passages, judgments)?,
        candidates,
    })
}

fn join(words: &[usize]) -> String {
    words.iter().map(|&w| word(w)).collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn overlap(q: &str, p: &str) -> usize {
        let qs: BTreeSet<&str> = q.split(' ').collect();
        p.split(' ').filter(|w| qs.contains(w)).count()
    }

    #[test]
    fn exactly_one_candidate_has_full_overlap() {
        let c = generate(&SyntheticConfig {
            num_queries: 30,
            query_words: 3,
            passage_words: 12,
            vocabulary_words: 200,
            max_negative_overlap: 1,
            ..SyntheticConfig::default()
        })
        .unwrap();
        for cand in &c.candidates {
            let q = c.dataset.query(&cand.query_id).unwrap();
            assert_eq!(cand.ranked.len(), 10);
            let mut best = Vec::new();
            for (pid, _) in &cand.ranked {
                let text = &c.dataset.passage(pid).unwrap().text;
                assert_eq!(text.split(' ').count(), 12);
                let o = overlap(&q.text, text);
                assert_eq!(o == 3, c.dataset.is_relevant(&q.id, pid));
                assert!(o == 3 || o <= 1);
                if o == 3 {
                    best.push(pid);
                }
            }
            assert_eq!(best.len(), 1);
        }
    }

    #[test]
    fn seeded() {
        let a = generate(&SyntheticConfig::default()).unwrap();
        assert_eq!(a, generate(&SyntheticConfig::default()).unwrap());
        let b = generate(&SyntheticConfig {
            seed: 1,
            ..SyntheticConfig::default()
        })
        .unwrap();
        assert_ne!(a.dataset.queries(), b.dataset.queries());
    }
}
