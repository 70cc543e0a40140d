//! Queries, passages and graded relevance judgments.
//!
//! Queries and passages are stored as JSON lines (`{"id": ..., "text": ...}`),
//! judgments as `query_id<TAB>passage_id<TAB>grade` rows.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_GRADE: u8 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
}

impl Query {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Query {
            id: id.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Passage {
    pub id: String,
    pub text: String,
    /// Number of whitespace-delimited tokens in `text`.
    pub token_count: usize,
}

impl Passage {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let token_count = text.split_whitespace().count();
        Passage {
            id: id.into(),
            text,
            token_count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Judgment<'a> {
    pub query_id: &'a str,
    pub passage_id: &'a str,
    pub grade: u8,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    text: String,
}

/// An immutable collection of queries, passages and judgments.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    queries: Vec<Query>,
    passages: Vec<Passage>,
    query_index: HashMap<String, usize>,
    passage_index: HashMap<String, usize>,
    judgments: BTreeMap<(String, String), u8>,
    /// Minimum grade counted as relevant.
    pub positivity_threshold: u8,
}

impl Dataset {
    pub fn new(
        queries: Vec<Query>,
        passages: Vec<Passage>,
        judgments: impl IntoIterator<Item = (String, String, u8)>,
    ) -> Result<Self> {
        let mut query_index = HashMap::with_capacity(queries.len());
        for (i, q) in queries.iter().enumerate() {
            validate_id(&q.id)?;
            if q.text.trim().is_empty() {
                return Err(Error::Integrity(format!("query {} has empty text", q.id)));
            }
            if query_index.insert(q.id.clone(), i).is_some() {
                return Err(Error::Integrity(format!("duplicate query id {}", q.id)));
            }
        }
        let mut passage_index = HashMap::with_capacity(passages.len());
        for (i, p) in passages.iter().enumerate() {
            validate_id(&p.id)?;
            if p.token_count == 0 {
                return Err(Error::Integrity(format!("passage {} has empty text", p.id)));
            }
            if passage_index.insert(p.id.clone(), i).is_some() {
                return Err(Error::Integrity(format!("duplicate passage id {}", p.id)));
            }
        }
        let mut table = BTreeMap::new();
        for (qid, pid, grade) in judgments {
            if grade > MAX_GRADE {
                return Err(Error::Integrity(format!(
                    "grade {grade} for ({qid}, {pid}) outside 0..={MAX_GRADE}"
                )));
            }
            if !query_index.contains_key(&qid) {
                return Err(Error::Integrity(format!("judgment references unknown query {qid}")));
            }
            if !passage_index.contains_key(&pid) {
                return Err(Error::Integrity(format!(
                    "judgment references unknown passage {pid}"
                )));
            }
            if table.insert((qid.clone(), pid.clone()), grade).is_some() {
                return Err(Error::Integrity(format!("duplicate judgment ({qid}, {pid})")));
            }
        }
        Ok(Dataset {
            queries,
            passages,
            query_index,
            passage_index,
            judgments: table,
            positivity_threshold: 1,
        })
    }

    pub fn with_positivity_threshold(mut self, threshold: u8) -> Self {
        self.positivity_threshold = threshold;
        self
    }

    pub fn queries(&self) -> &[Query] {
        &self.queries
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn query(&self, id: &str) -> Option<&Query> {
        self.query_index.get(id).map(|&i| &self.queries[i])
    }

    pub fn passage(&self, id: &str) -> Option<&Passage> {
        self.passage_index.get(id).map(|&i| &self.passages[i])
    }

    pub fn judgments(&self) -> impl Iterator<Item = Judgment<'_>> {
        self.judgments.iter().map(|((q, p), &grade)| Judgment {
            query_id: q,
            passage_id: p,
            grade,
        })
    }

    pub fn num_judgments(&self) -> usize {
        self.judgments.len()
    }

    pub fn grade(&self, query_id: &str, passage_id: &str) -> Option<u8> {
        self.judgments
            .get(&(query_id.to_string(), passage_id.to_string()))
            .copied()
    }

    pub fn is_relevant(&self, query_id: &str, passage_id: &str) -> bool {
        self.grade(query_id, passage_id)
            .is_some_and(|g| g >= self.positivity_threshold)
    }

    /// Ids of all passages judged relevant for the query, in ascending order.
    pub fn relevant_ids(&self, query_id: &str) -> BTreeSet<String> {
        let lo = (query_id.to_string(), String::new());
        self.judgments
            .range(lo..)
            .take_while(|((q, _), _)| q == query_id)
            .filter(|(_, &g)| g >= self.positivity_threshold)
            .map(|((_, p), _)| p.clone())
            .collect()
    }

    /// Loads the three ingestion files. Duplicate ids and dangling judgments are rejected.
    pub fn load(
        queries_path: impl AsRef<Path>,
        passages_path: impl AsRef<Path>,
        qrels_path: impl AsRef<Path>,
    ) -> Result<Self> {
        let queries = read_queries(queries_path.as_ref())?;
        let passages = read_passages(passages_path.as_ref())?;
        let qrels = read_qrels(qrels_path.as_ref())?;
        Dataset::new(queries, passages, qrels)
    }

    pub fn save(
        &self,
        queries_path: impl AsRef<Path>,
        passages_path: impl AsRef<Path>,
        qrels_path: impl AsRef<Path>,
    ) -> Result<()> {
        write_records(
            queries_path.as_ref(),
            self.queries.iter().map(|q| (q.id.as_str(), q.text.as_str())),
        )?;
        write_records(
            passages_path.as_ref(),
            self.passages.iter().map(|p| (p.id.as_str(), p.text.as_str())),
        )?;
        let path = qrels_path.as_ref();
        let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        for j in self.judgments() {
            writeln!(out, "{}\t{}\t{}", j.query_id, j.passage_id, j.grade)
                .map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

/// Reads a queries file (`{"id", "text"}` JSON lines).
pub fn read_queries(path: &Path) -> Result<Vec<Query>> {
    Ok(read_records(path)?
        .into_iter()
        .map(|r| Query::new(r.id, r.text))
        .collect())
}

/// Reads a passages file (`{"id", "text"}` JSON lines).
pub fn read_passages(path: &Path) -> Result<Vec<Passage>> {
    Ok(read_records(path)?
        .into_iter()
        .map(|r| Passage::new(r.id, r.text))
        .collect())
}

fn validate_id(id: &str) -> Result<()> {
    if id.is_empty() {
        return Err(Error::Integrity("empty id".into()));
    }
    if id.contains(['\t', '\n', '\r']) {
        return Err(Error::Integrity(format!("id {id:?} contains a tab or newline")));
    }
    Ok(())
}

fn read_records(path: &Path) -> Result<Vec<Record>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn write_records<'a>(path: &Path, records: impl Iterator<Item = (&'a str, &'a str)>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for (id, text) in records {
        let line = serde_json::to_string(&Record {
            id: id.to_string(),
            text: text.to_string(),
        })
        .expect("string records always serialize");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads `query_id<TAB>passage_id<TAB>grade` rows.
pub fn read_qrels(path: &Path) -> Result<Vec<(String, String, u8)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 tab-separated fields, got {}", fields.len())));
        }
        let grade: u8 = fields[2]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad grade {:?}", fields[2])))?;
        out.push((fields[0].to_string(), fields[1].to_string(), grade));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub num_queries: usize,
    pub num_passages: usize,
    /// `None` when there are no passages.
    pub min_tokens: Option<usize>,
    pub max_tokens: Option<usize>,
    pub avg_tokens: Option<f64>,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<String>| v.unwrap_or_else(|| "n/a".to_string());
        write!(
            f,
            "queries\t{}\npassages\t{}\nmin_len\t{}\nmax_len\t{}\navg_len\t{}",
            self.num_queries,
            self.num_passages,
            opt(self.min_tokens.map(|v| v.to_string())),
            opt(self.max_tokens.map(|v| v.to_string())),
            opt(self.avg_tokens.map(|v| format!("{v:.1}"))),
        )
    }
}

pub fn stats(d: &Dataset) -> DatasetStats {
    let counts = d.passages.iter().map(|p| p.token_count);
    let n = d.passages.len();
    DatasetStats {
        num_queries: d.queries.len(),
        num_passages: n,
        min_tokens: counts.clone().min(),
        max_tokens: counts.clone().max(),
        avg_tokens: (n > 0).then(|| counts.sum::<usize>() as f64 / n as f64),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub num_folds: usize,
    pub assignment: BTreeMap<String, usize>,
    pub seed: u64,
}

impl FoldAssignment {
    /// Query ids assigned to `fold`, ascending.
    pub fn fold_queries(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(q, _)| q.as_str())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_folds];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }
}

/// Seeded shuffle of the query ids followed by round-robin fold assignment.
pub fn split_folds(d: &Dataset, num_folds: usize, seed: u64) -> Result<FoldAssignment> {
    if num_folds < 2 {
        return Err(Error::Argument(format!("need at least 2 folds, got {num_folds}")));
    }
    if num_folds > d.queries.len() {
        return Err(Error::Argument(format!(
            "{num_folds} folds requested for {} queries",
            d.queries.len()
        )));
    }
    let mut ids: Vec<&str> = d.queries.iter().map(|q| q.id.as_str()).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignment = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.to_string(), i % num_folds))
        .collect();
    Ok(FoldAssignment {
        num_folds,
        assignment,
        seed,
    })
}

/// Mean and sample (n-1) standard deviation of passage token counts.
pub fn estimate_length_distribution(positives: &[Passage]) -> Result<(f64, f64)> {
    if positives.len() < 2 {
        return Err(Error::Argument(format!(
            "need at least 2 passages to estimate a length distribution, got {}",
            positives.len()
        )));
    }
    // Welford
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, p) in positives.iter().enumerate() {
        let x = p.token_count as f64;
        let delta = x - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (x - mean);
    }
    let var = m2 / (positives.len() - 1) as f64;
    Ok((mean, var.max(0.0).sqrt()))
}

/// Cuts an irrelevant sequence into contiguous pseudo-passages whose lengths follow
/// `Normal(mu, sigma)`, rounded to nearest and clipped to `[1, remaining]`.
pub fn split_negative_sequences(
    sequence: &Passage,
    mu: f64,
    sigma: f64,
    seed: u64,
) -> Result<Vec<Passage>> {
    if !mu.is_finite() || mu <= 0.0 {
        return Err(Error::Argument(format!("mean length must be positive, got {mu}")));
    }
    if !sigma.is_finite() || sigma < 0.0 {
        return Err(Error::Argument(format!("bad standard deviation {sigma}")));
    }
    let tokens: Vec<&str> = sequence.text.split_whitespace().collect();
    let normal = Normal::new(mu, sigma).map_err(|e| Error::Argument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut start = 0;
    while start < tokens.len() {
        let remaining = tokens.len() - start;
        let drawn = if sigma == 0.0 { mu } else { normal.sample(&mut rng) };
        let len = (drawn.round().max(1.0) as usize).min(remaining);
        out.push(Passage::new(
            format!("{}#{}", sequence.id, out.len()),
            tokens[start..start + len].join(" "),
        ));
        start += len;
    }
    Ok(out)
}
