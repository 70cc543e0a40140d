//! Chunked passage encoding: a passage's subword sequence is cut into equal
//! contiguous chunks, each chunk is encoded together with the full query, and
//! the per-chunk pooled vectors are merged by additive attention or max-pooling.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Query;
use crate::encoder::{Encoder, PooledVector};
use crate::error::{Error, Result};
use crate::ltr::RankHead;
use crate::params::{init_matrix, init_vector, mat_mut, mat_ref, vec_mut, vec_ref, ParamSet, TensorMut, TensorRef};
use crate::tokenizer::{EncodedPair, Vocabulary};

pub const DEFAULT_ATTENTION_SIZE: usize = 192;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkSet {
    pub passage_id: String,
    /// Half-open spans over the passage's subword sequence.
    pub chunks: Vec<Range<usize>>,
}

impl ChunkSet {
    pub fn num_chunks(&self) -> usize {
        self.chunks.len()
    }
}

/// Equal partition; the first `len % num_chunks` chunks are one longer.
pub fn chunk_passage(passage_id: &str, len: usize, num_chunks: usize) -> Result<ChunkSet> {
    if num_chunks == 0 {
        return Err(Error::Argument("num_chunks must be at least 1".into()));
    }
    if len == 0 {
        return Err(Error::Argument(format!("passage {passage_id} has no tokens to chunk")));
    }
    if num_chunks > len {
        return Err(Error::Argument(format!(
            "cannot cut {len} tokens of passage {passage_id} into {num_chunks} chunks"
        )));
    }
    let base = len / num_chunks;
    let extra = len % num_chunks;
    let mut start = 0;
    let chunks = (0..num_chunks)
        .map(|i| {
            let size = base + usize::from(i < extra);
            let r = start..start + size;
            start += size;
            r
        })
        .collect();
    Ok(ChunkSet {
        passage_id: passage_id.to_string(),
        chunks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    Attention,
    Max,
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregator::Attention => "attention",
            Aggregator::Max => "max",
        })
    }
}

impl FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "attention" | "attn" => Ok(Aggregator::Attention),
            "max" | "maxpool" | "max-pool" => Ok(Aggregator::Max),
            other => Err(Error::Argument(format!("unknown aggregator {other:?}"))),
        }
    }
}

/// Additive attention with a learned context vector:
/// `αᵢ = softmaxᵢ(u · tanh(W hᵢ + b))`, output `Σ αᵢ hᵢ`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPoolParams {
    /// `attention_size x H`
    pub projection: Array2<f64>,
    pub bias: Array1<f64>,
    pub context: Array1<f64>,
}

pub struct AttentionCache {
    pub weights: Vec<f64>,
    hidden: Vec<Array1<f64>>,
}

impl AttentionPoolParams {
    pub fn init(attention_size: usize, hidden_dim: usize, seed: u64) -> Result<Self> {
        if attention_size == 0 {
            return Err(Error::Config("attention_size must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(AttentionPoolParams {
            projection: init_matrix(&mut rng, attention_size, hidden_dim),
            bias: Array1::zeros(attention_size),
            context: init_vector(&mut rng, attention_size),
        })
    }

    pub fn attention_size(&self) -> usize {
        self.bias.len()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    pub fn forward(&self, chunks: &[PooledVector]) -> Result<(PooledVector, AttentionCache)> {
        if chunks.is_empty() {
            return Err(Error::Argument("attention pooling needs at least one vector".into()));
        }
        let hidden: Vec<Array1<f64>> = chunks
            .iter()
            .map(|h| (self.projection.dot(h) + &self.bias).mapv(f64::tanh))
            .collect();
        let energies: Vec<f64> = hidden.iter().map(|z| z.dot(&self.context)).collect();
        let max = energies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = energies.iter().map(|e| (e - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let weights: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let mut out = Array1::zeros(chunks[0].len());
        for (h, &a) in chunks.iter().zip(&weights) {
            out.scaled_add(a, h);
        }
        Ok((out, AttentionCache { weights, hidden }))
    }

    /// Accumulates parameter gradients and returns `d loss / d hᵢ` per chunk.
    pub fn backward(
        &self,
        chunks: &[PooledVector],
        cache: &AttentionCache,
        dout: &Array1<f64>,
        grads: &mut AttentionPoolParams,
    ) -> Vec<Array1<f64>> {
        let dweights: Vec<f64> = chunks.iter().map(|h| h.dot(dout)).collect();
        let mean: f64 = cache.weights.iter().zip(&dweights).map(|(a, d)| a * d).sum();
        chunks
            .iter()
            .zip(&cache.hidden)
            .zip(cache.weights.iter().zip(&dweights))
            .map(|((h, z), (&a, &da))| {
                let de = a * (da - mean);
                grads.context.scaled_add(de, z);
                let dpre = z.mapv(|t| de * (1.0 - t * t)) * &self.context;
                for (r, &d) in dpre.iter().enumerate() {
                    grads.projection.row_mut(r).scaled_add(d, h);
                }
                grads.bias += &dpre;
                dout * a + self.projection.t().dot(&dpre)
            })
            .collect()
    }
}

impl ParamSet for AttentionPoolParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        vec![
            mat_ref("seg.W_a", &self.projection),
            vec_ref("seg.b_a", &self.bias),
            vec_ref("seg.u_a", &self.context),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        vec![
            mat_mut("seg.W_a", &mut self.projection),
            vec_mut("seg.b_a", &mut self.bias),
            vec_mut("seg.u_a", &mut self.context),
        ]
    }
}

/// Attention-pooled representation of `chunks`.
pub fn attention_pool(ap: &AttentionPoolParams, chunks: &[PooledVector]) -> Result<PooledVector> {
    ap.forward(chunks).map(|(v, _)| v)
}

/// Componentwise maximum, plus the index of the winning chunk per component
/// (first on ties) for routing gradients.
pub fn max_pool_with_argmax(chunks: &[PooledVector]) -> Result<(PooledVector, Vec<usize>)> {
    let first = chunks
        .first()
        .ok_or_else(|| Error::Argument("max pooling needs at least one vector".into()))?;
    let mut out = first.clone();
    let mut arg = vec![0; first.len()];
    for (i, h) in chunks.iter().enumerate().skip(1) {
        for (k, &x) in h.iter().enumerate() {
            if x > out[k] {
                out[k] = x;
                arg[k] = i;
            }
        }
    }
    Ok((out, arg))
}

pub fn max_pool(chunks: &[PooledVector]) -> Result<PooledVector> {
    max_pool_with_argmax(chunks).map(|(v, _)| v)
}

/// Chunking and aggregation settings for a segmented scorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub num_chunks: usize,
    pub chunk_seq_len: usize,
    pub aggregator: Aggregator,
}

impl FromStr for SegmentConfig {
    type Err = Error;

    /// Parses `CHUNKSxSEQLEN[:aggregator]`, e.g. `2x128` or `3x128:max`.
    fn from_str(s: &str) -> Result<Self> {
        let (shape, agg) = match s.split_once(':') {
            Some((a, b)) => (a, b.parse()?),
            None => (s, Aggregator::Attention),
        };
        let bad = || Error::Argument(format!("segmentation spec {s:?} is not CHUNKSxSEQLEN"));
        let (n, len) = shape.split_once(['x', 'X']).ok_or_else(bad)?;
        Ok(SegmentConfig {
            num_chunks: n.trim().parse().map_err(|_| bad())?,
            chunk_seq_len: len.trim().parse().map_err(|_| bad())?,
            aggregator: agg,
        })
    }
}

/// Encodes the query against each chunk of the passage. Passages with fewer
/// subword tokens than `num_chunks` get one chunk per token (one empty chunk
/// for an empty passage).
pub fn encode_chunks(
    vocab: &Vocabulary,
    query: &Query,
    passage_id: &str,
    passage_text: &str,
    num_chunks: usize,
    chunk_seq_len: usize,
) -> Result<Vec<EncodedPair>> {
    let q = vocab.tokenize(&query.text);
    let p = vocab.tokenize(passage_text);
    if p.is_empty() {
        return Ok(vec![EncodedPair::from_ids(&query.id, &q, &[], chunk_seq_len)?]);
    }
    let set = chunk_passage(passage_id, p.len(), num_chunks.min(p.len()))?;
    set.chunks
        .iter()
        .map(|r| EncodedPair::from_ids(&query.id, &q, &p[r.clone()], chunk_seq_len))
        .collect()
}

/// Segmented relevance score: encode every (query, chunk) pair, aggregate the pooled
/// vectors, and score with the head.
#[allow(clippy::too_many_arguments)]
pub fn score_segmented(
    encoder: &Encoder,
    head: &RankHead,
    attention: Option<&AttentionPoolParams>,
    vocab: &Vocabulary,
    query: &Query,
    passage_id: &str,
    passage_text: &str,
    seg: SegmentConfig,
) -> Result<f64> {
    if seg.chunk_seq_len > encoder.config.max_seq_len {
        return Err(Error::Shape(format!(
            "chunk_seq_len {} exceeds encoder max_seq_len {}",
            seg.chunk_seq_len, encoder.config.max_seq_len
        )));
    }
    let pairs = encode_chunks(vocab, query, passage_id, passage_text, seg.num_chunks, seg.chunk_seq_len)?;
    let pooled = pairs
        .iter()
        .map(|p| encoder.encode(p))
        .collect::<Result<Vec<_>>>()?;
    let rep = match seg.aggregator {
        Aggregator::Attention => {
            let ap = attention.ok_or_else(|| {
                Error::Usage("attention aggregation needs attention-pool parameters".into())
            })?;
            attention_pool(ap, &pooled)?
        }
        Aggregator::Max => max_pool(&pooled)?,
    };
    Ok(head.v()?.dot(&rep))
}
