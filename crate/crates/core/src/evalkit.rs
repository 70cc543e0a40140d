//! Ranking metrics (P@1, MAP, MRR), gold injection, cross-validation and run files.
//!
//! Run files use the six-column format `query_id Q0 passage_id rank score tag`.
//! Metric means are taken over queries with at least one relevant passage;
//! other queries are listed in [`MetricReport::excluded`].

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::{self, Write as _};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, FoldAssignment};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub passage_id: String,
    pub score: f64,
    pub relevant: bool,
}

/// A ranking under evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<RankedEntry>,
    /// Relevant passages for the query, retrieved or not.
    pub total_relevant: usize,
}

impl RankedList {
    pub fn new(
        query_id: impl Into<String>,
        entries: Vec<RankedEntry>,
        total_relevant: usize,
    ) -> Result<Self> {
        let query_id = query_id.into();
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.passage_id.as_str()) {
                return Err(Error::Argument(format!(
                    "passage {} listed twice for query {query_id}",
                    e.passage_id
                )));
            }
        }
        let retrieved = entries.iter().filter(|e| e.relevant).count();
        if retrieved > total_relevant {
            return Err(Error::Argument(format!(
                "query {query_id}: {retrieved} relevant entries but total_relevant is {total_relevant}"
            )));
        }
        Ok(RankedList {
            query_id,
            entries,
            total_relevant,
        })
    }

    /// Resolves relevance flags and the relevant total from `dataset`.
    pub fn from_scored(query_id: &str, scored: &[(String, f64)], dataset: &Dataset) -> Result<Self> {
        let entries = scored
            .iter()
            .map(|(p, s)| RankedEntry {
                passage_id: p.clone(),
                score: *s,
                relevant: dataset.is_relevant(query_id, p),
            })
            .collect();
        RankedList::new(query_id, entries, dataset.relevant_ids(query_id).len())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Places a gold passage at rank `k` when none is in the top `k`.
///
/// The lowest gold id is used. It replaces the `k`-th entry (the list is cut to
/// `k`), or is appended when the list is shorter than `k`. The injected entry
/// takes the score of the entry it replaces, or of the last entry when appended.
pub fn inject_gold(ranked: &RankedList, gold_ids: &BTreeSet<String>, k: usize) -> Result<RankedList> {
    if k == 0 {
        return Err(Error::Argument("gold injection depth k must be at least 1".into()));
    }
    let Some(gold) = gold_ids.iter().next() else {
        return Ok(ranked.clone());
    };
    if ranked.entries.iter().take(k).any(|e| gold_ids.contains(&e.passage_id)) {
        return Ok(ranked.clone());
    }
    let mut entries: Vec<RankedEntry> = ranked.entries.iter().take(k).cloned().collect();
    let score = entries.last().map_or(0.0, |e| e.score);
    let injected = RankedEntry {
        passage_id: gold.clone(),
        score,
        relevant: true,
    };
    if entries.len() == k {
        entries[k - 1] = injected;
    } else {
        entries.push(injected);
    }
    let total = ranked.total_relevant.max(entries.iter().filter(|e| e.relevant).count());
    RankedList::new(ranked.query_id.clone(), entries, total)
}

/// 1 if the top entry is relevant; 0 for an empty list.
pub fn precision_at_1(ranked: &RankedList) -> f64 {
    match ranked.entries.first() {
        Some(e) if e.relevant => 1.0,
        _ => 0.0,
    }
}

/// Average precision with the total relevant count as denominator, so unretrieved
/// relevant passages count as zero. `None` when the query has no relevant passage.
pub fn average_precision(ranked: &RankedList) -> Option<f64> {
    if ranked.total_relevant == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, e) in ranked.entries.iter().enumerate() {
        if e.relevant {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(sum / ranked.total_relevant as f64)
}

pub fn reciprocal_rank(ranked: &RankedList) -> f64 {
    ranked
        .entries
        .iter()
        .position(|e| e.relevant)
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub p_at_1: f64,
    pub average_precision: f64,
    pub reciprocal_rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_query: BTreeMap<String, QueryMetrics>,
    /// Queries without any relevant passage; not part of the means.
    pub excluded: Vec<String>,
    pub num_queries: usize,
    /// Means are `None` when no query was evaluated.
    pub p_at_1: Option<f64>,
    pub map: Option<f64>,
    pub mrr: Option<f64>,
}

impl MetricReport {
    fn from_per_query(per_query: BTreeMap<String, QueryMetrics>, excluded: Vec<String>) -> Self {
        let n = per_query.len();
        let mean = |f: fn(&QueryMetrics) -> f64| {
            (n > 0).then(|| per_query.values().map(f).sum::<f64>() / n as f64)
        };
        MetricReport {
            p_at_1: mean(|m| m.p_at_1),
            map: mean(|m| m.average_precision),
            mrr: mean(|m| m.reciprocal_rank),
            num_queries: n,
            per_query,
            excluded,
        }
    }

    pub fn get(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::PAt1 => self.p_at_1,
            Metric::Map => self.map,
            Metric::Mrr => self.mrr,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::State(format!("report encoding: {e}")))
    }
}

/// Per-query metrics and their means. When a query appears more than once the
/// last list wins.
pub fn evaluate_run(lists: &[RankedList]) -> MetricReport {
    let mut per_query = BTreeMap::new();
    let mut excluded = BTreeSet::new();
    for l in lists {
        match average_precision(l) {
            Some(ap) => {
                excluded.remove(&l.query_id);
                per_query.insert(
                    l.query_id.clone(),
                    QueryMetrics {
                        p_at_1: precision_at_1(l),
                        average_precision: ap,
                        reciprocal_rank: reciprocal_rank(l),
                    },
                );
            }
            None => {
                per_query.remove(&l.query_id);
                excluded.insert(l.query_id.clone());
            }
        }
    }
    MetricReport::from_per_query(per_query, excluded.into_iter().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    PAt1,
    Map,
    Mrr,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::PAt1, Metric::Map, Metric::Mrr];

    pub fn label(self) -> &'static str {
        match self {
            Metric::PAt1 => "P@1",
            Metric::Map => "MAP",
            Metric::Mrr => "MRR",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "p@1" | "p1" | "p_at_1" | "precision" => Ok(Metric::PAt1),
            "map" => Ok(Metric::Map),
            "mrr" => Ok(Metric::Mrr),
            other => Err(Error::Argument(format!("unknown metric {other:?} (p@1, map, mrr)"))),
        }
    }
}

/// Tab-separated table with one row per labelled report. Means print with four
/// decimals; undefined means print as `n/a`.
pub fn format_table(rows: &[(String, &MetricReport)], metrics: &[Metric], first_column: &str) -> String {
    let mut out = String::from(first_column);
    for m in metrics {
        out.push('\t');
        out.push_str(m.label());
    }
    out.push_str("\tqueries\n");
    for (label, report) in rows {
        out.push_str(label);
        for &m in metrics {
            match report.get(m) {
                Some(v) => write!(out, "\t{v:.4}").unwrap(),
                None => out.push_str("\tn/a"),
            }
        }
        writeln!(out, "\t{}", report.num_queries).unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub per_fold: Vec<MetricReport>,
    /// Metrics over every evaluated query of every fold, each weighted equally.
    pub pooled: MetricReport,
}

/// For each fold, trains on the other folds' queries and evaluates on its own.
///
/// `train_fn(fold, training_query_ids)` returns a model that
/// `eval_fn(fold, &model, test_query_ids)` turns into ranked lists. Folds run in
/// order; the first failure aborts with the fold index.
pub fn cross_validate<M, T, E>(
    folds: &FoldAssignment,
    mut train_fn: T,
    mut eval_fn: E,
) -> Result<CrossValidation>
where
    T: FnMut(usize, &BTreeSet<String>) -> Result<M>,
    E: FnMut(usize, &M, &[&str]) -> Result<Vec<RankedList>>,
{
    let mut per_fold = Vec::with_capacity(folds.num_folds);
    let mut all = Vec::new();
    for f in 0..folds.num_folds {
        let train_ids: BTreeSet<String> = folds
            .assignment
            .iter()
            .filter(|(_, &g)| g != f)
            .map(|(q, _)| q.clone())
            .collect();
        let test_ids = folds.fold_queries(f);
        let wrap = |e: Error| Error::Training(format!("fold {f}: {e}"));
        let model = train_fn(f, &train_ids).map_err(wrap)?;
        let lists = eval_fn(f, &model, &test_ids).map_err(wrap)?;
        per_fold.push(evaluate_run(&lists));
        all.extend(lists);
    }
    Ok(CrossValidation {
        per_fold,
        pooled: evaluate_run(&all),
    })
}

/// A run: per query (in file order), `(passage_id, score)` best first.
pub type Run = Vec<(String, Vec<(String, f64)>)>;

pub fn format_run(lists: &[(String, Vec<(String, f64)>)], tag: &str) -> String {
    let mut out = String::new();
    for (q, entries) in lists {
        for (i, (p, s)) in entries.iter().enumerate() {
            writeln!(out, "{q} Q0 {p} {} {s} {tag}", i + 1).unwrap();
        }
    }
    out
}

pub fn write_run(path: &Path, lists: &[(String, Vec<(String, f64)>)], tag: &str) -> Result<()> {
    fs::write(path, format_run(lists, tag)).map_err(|e| Error::io(path, e))
}

/// Reads a run file. Entries are re-ordered by their rank column; queries keep
/// the order of first appearance.
pub fn read_run(path: &Path) -> Result<Run> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut order: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, Vec<(usize, String, f64)>> = BTreeMap::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 6 {
            return Err(bad(format!("expected 6 columns, found {}", cols.len())));
        }
        let rank: usize = cols[3].parse().map_err(|_| bad(format!("bad rank {:?}", cols[3])))?;
        let score: f64 = cols[4].parse().map_err(|_| bad(format!("bad score {:?}", cols[4])))?;
        let q = cols[0].to_string();
        if !rows.contains_key(&q) {
            order.push(q.clone());
        }
        let entries = rows.entry(q).or_default();
        if entries.iter().any(|(_, p, _)| p == cols[2]) {
            return Err(bad(format!("passage {} repeated for query {}", cols[2], cols[0])));
        }
        entries.push((rank, cols[2].to_string(), score));
    }
    Ok(order
        .into_iter()
        .map(|q| {
            let mut e = rows.remove(&q).unwrap_or_default();
            e.sort_by_key(|(r, _, _)| *r);
            (q, e.into_iter().map(|(_, p, s)| (p, s)).collect())
        })
        .collect())
}

/// Attaches relevance from `dataset` to every list of `run`. Unknown query ids
/// are reported together.
pub fn resolve_run(run: &Run, dataset: &Dataset) -> Result<Vec<RankedList>> {
    let unknown: Vec<&str> = run
        .iter()
        .map(|(q, _)| q.as_str())
        .filter(|q| dataset.query(q).is_none())
        .collect();
    if !unknown.is_empty() {
        return Err(Error::Argument(format!(
            "run references unknown query ids: {}",
            unknown.join(", ")
        )));
    }
    run.iter()
        .map(|(q, e)| RankedList::from_scored(q, e, dataset))
        .collect()
}
