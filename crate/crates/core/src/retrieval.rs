//! BM25 first-stage retrieval over an in-memory inverted index.
//!
//! Index file layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "BM25IDX\0"
//! version    u32      1
//! num_docs   u64
//! k1         f64
//! b          f64
//! docs       num_docs x { id_len u32, id utf-8, length u32 }   ascending id order
//! num_terms  u64
//! terms      num_terms x { term_len u32, term utf-8, n u32, n x { doc u32, tf u32 } }
//! ```
//!
//! Terms are written in ascending byte order and postings in ascending document
//! order, so the file is a pure function of the collection and parameters.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::corpus::{Passage, Query};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"BM25IDX\0";
const VERSION: u32 = 1;

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

/// Lowercased alphanumeric runs.
pub fn terms(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub doc: u32,
    pub tf: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    /// Passage ids, ascending. A document number is a position in this list.
    doc_ids: Vec<String>,
    doc_lengths: Vec<u32>,
    doc_lookup: HashMap<String, u32>,
    postings: BTreeMap<String, Vec<Posting>>,
    avg_doc_length: f64,
    k1: f64,
    b: f64,
}

impl InvertedIndex {
    pub fn build(passages: &[Passage], k1: f64, b: f64) -> Result<Self> {
        check_params(k1, b)?;
        let mut order: Vec<&Passage> = passages.iter().collect();
        order.sort_by(|x, y| x.id.cmp(&y.id));
        if let Some(w) = order.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::Argument(format!("duplicate passage id {}", w[0].id)));
        }
        let mut postings: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(order.len());
        for (doc, p) in order.iter().enumerate() {
            let ts = terms(&p.text);
            doc_lengths.push(ts.len() as u32);
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in ts {
                *tf.entry(t).or_default() += 1;
            }
            for (t, n) in tf {
                postings.entry(t).or_default().push(Posting {
                    doc: doc as u32,
                    tf: n,
                });
            }
        }
        let doc_ids = order.iter().map(|p| p.id.clone()).collect();
        Ok(Self::assemble(doc_ids, doc_lengths, postings, k1, b))
    }

    fn assemble(
        doc_ids: Vec<String>,
        doc_lengths: Vec<u32>,
        postings: BTreeMap<String, Vec<Posting>>,
        k1: f64,
        b: f64,
    ) -> Self {
        let avg_doc_length = if doc_lengths.is_empty() {
            0.0
        } else {
            doc_lengths.iter().map(|&l| l as f64).sum::<f64>() / doc_lengths.len() as f64
        };
        let doc_lookup = doc_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i as u32))
            .collect();
        InvertedIndex {
            doc_ids,
            doc_lengths,
            doc_lookup,
            postings,
            avg_doc_length,
            k1,
            b,
        }
    }

    pub fn num_docs(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn k1(&self) -> f64 {
        self.k1
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn doc_length(&self, passage_id: &str) -> Option<u32> {
        self.doc_lookup
            .get(passage_id)
            .map(|&d| self.doc_lengths[d as usize])
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.postings.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.num_docs() as f64;
        let df = self.postings(term).len() as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_weight(&self, idf: f64, tf: u32, doc: u32) -> f64 {
        let tf = tf as f64;
        let len = self.doc_lengths[doc as usize] as f64;
        let norm = if self.avg_doc_length > 0.0 {
            1.0 - self.b + self.b * len / self.avg_doc_length
        } else {
            1.0
        };
        idf * tf * (self.k1 + 1.0) / (tf + self.k1 * norm)
    }

    /// BM25 score of one passage. Repeated query terms count once per occurrence.
    pub fn score(&self, query_terms: &[String], passage_id: &str) -> Result<f64> {
        let doc = *self
            .doc_lookup
            .get(passage_id)
            .ok_or_else(|| Error::Argument(format!("passage {passage_id} is not indexed")))?;
        let mut total = 0.0;
        for t in query_terms {
            let plist = self.postings(t);
            if let Ok(i) = plist.binary_search_by_key(&doc, |p| p.doc) {
                total += self.term_weight(self.idf(t), plist[i].tf, doc);
            }
        }
        Ok(total)
    }

    /// The `k` best passages with a positive score, best first, ties by ascending id.
    pub fn top_k(&self, query: &Query, k: usize) -> Candidates {
        let query_terms = terms(&query.text);
        let mut acc: HashMap<u32, f64> = HashMap::new();
        for t in &query_terms {
            let idf = self.idf(t);
            for p in self.postings(t) {
                *acc.entry(p.doc).or_default() += self.term_weight(idf, p.tf, p.doc);
            }
        }
        let mut scored: Vec<(u32, f64)> = acc.into_iter().filter(|&(_, s)| s > 0.0).collect();
        // doc numbers follow ascending passage id
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Candidates {
            query_id: query.id.clone(),
            ranked: scored
                .into_iter()
                .map(|(d, s)| (self.doc_ids[d as usize].clone(), s))
                .collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u64::<LittleEndian>(self.num_docs() as u64)?;
        w.write_f64::<LittleEndian>(self.k1)?;
        w.write_f64::<LittleEndian>(self.b)?;
        for (id, &len) in self.doc_ids.iter().zip(&self.doc_lengths) {
            write_str(w, id)?;
            w.write_u32::<LittleEndian>(len)?;
        }
        w.write_u64::<LittleEndian>(self.postings.len() as u64)?;
        for (term, plist) in &self.postings {
            write_str(w, term)?;
            w.write_u32::<LittleEndian>(plist.len() as u32)?;
            for p in plist {
                w.write_u32::<LittleEndian>(p.doc)?;
                w.write_u32::<LittleEndian>(p.tf)?;
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let bad = |m: &str| Error::format(path, m);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("not a BM25 index file"));
        }
        let io = |e: std::io::Error| Error::format(path, format!("truncated or corrupt: {e}"));
        let version = r.read_u32::<LittleEndian>().map_err(io)?;
        if version != VERSION {
            return Err(bad(&format!("unsupported index version {version}")));
        }
        let num_docs = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let k1 = r.read_f64::<LittleEndian>().map_err(io)?;
        let b = r.read_f64::<LittleEndian>().map_err(io)?;
        check_params(k1, b).map_err(|e| bad(&e.to_string()))?;
        let mut doc_ids = Vec::with_capacity(num_docs.min(1 << 20));
        let mut doc_lengths = Vec::with_capacity(num_docs.min(1 << 20));
        for _ in 0..num_docs {
            doc_ids.push(read_str(&mut r).map_err(io)?);
            doc_lengths.push(r.read_u32::<LittleEndian>().map_err(io)?);
        }
        let num_terms = r.read_u64::<LittleEndian>().map_err(io)?;
        let mut postings = BTreeMap::new();
        for _ in 0..num_terms {
            let term = read_str(&mut r).map_err(io)?;
            let n = r.read_u32::<LittleEndian>().map_err(io)? as usize;
            let mut plist = Vec::with_capacity(n.min(1 << 20));
            for _ in 0..n {
                let doc = r.read_u32::<LittleEndian>().map_err(io)?;
                let tf = r.read_u32::<LittleEndian>().map_err(io)?;
                if doc as usize >= num_docs {
                    return Err(bad("posting references a missing document"));
                }
                plist.push(Posting { doc, tf });
            }
            postings.insert(term, plist);
        }
        Ok(Self::assemble(doc_ids, doc_lengths, postings, k1, b))
    }
}

fn check_params(k1: f64, b: f64) -> Result<()> {
    if !k1.is_finite() || k1 <= 0.0 {
        return Err(Error::Argument(format!("k1 must be positive, got {k1}")));
    }
    if !(0.0..=1.0).contains(&b) {
        return Err(Error::Argument(format!("b must lie in [0, 1], got {b}")));
    }
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> std::io::Result<String> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
}

/// First-stage result list for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidates {
    pub query_id: String,
    /// `(passage_id, bm25_score)`, best first.
    pub ranked: Vec<(String, f64)>,
}

impl Candidates {
    pub fn passage_ids(&self) -> impl Iterator<Item = &str> {
        self.ranked.iter().map(|(p, _)| p.as_str())
    }
}
