//! Ranking heads with their training objectives, and training-example construction.
//!
//! * point-wise: a two-way classifier over the pooled vector; the probability of
//!   the relevant label is the score.
//! * triplet hinge: `score = pooled · v`, the two scores of a (positive, negative)
//!   pair are softmax-normalized and penalized by `max(m - (ŝ⁺ - ŝ⁻), 0)`.
//! * pair-wise cross-entropy: same score, loss `-ln ŝ⁺`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, PooledVector};
use crate::error::{Error, Result};
use crate::params::{init_matrix, init_vector, mat_mut, mat_ref, vec_mut, vec_ref, ParamSet, TensorMut, TensorRef};
use crate::tokenizer::EncodedPair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Pointwise,
    Bertlets,
    PairwiseCe,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Pointwise => "pointwise",
            HeadKind::Bertlets => "bertlets",
            HeadKind::PairwiseCe => "pairwise_ce",
        }
    }

    /// Whether the head is trained on (positive, negative) pairs.
    pub fn is_pairwise(self) -> bool {
        !matches!(self, HeadKind::Pointwise)
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "pointwise" | "pw" => Ok(HeadKind::Pointwise),
            "bertlets" | "triplet" => Ok(HeadKind::Bertlets),
            "pairwise_ce" | "ce" => Ok(HeadKind::PairwiseCe),
            other => Err(Error::Argument(format!("unknown head kind {other:?}"))),
        }
    }
}

/// Trainable scoring head on top of the pooled representation.
#[derive(Debug, Clone, PartialEq)]
pub enum RankHead {
    /// Two-label classifier; row 1 of `weight` is the relevant label.
    Pointwise { weight: Array2<f64>, bias: Array1<f64> },
    Bertlets { v: Array1<f64> },
    PairwiseCe { v: Array1<f64> },
}

impl RankHead {
    pub fn init(kind: HeadKind, hidden_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match kind {
            HeadKind::Pointwise => RankHead::Pointwise {
                weight: init_matrix(&mut rng, 2, hidden_dim),
                bias: Array1::zeros(2),
            },
            HeadKind::Bertlets => RankHead::Bertlets {
                v: init_vector(&mut rng, hidden_dim),
            },
            HeadKind::PairwiseCe => RankHead::PairwiseCe {
                v: init_vector(&mut rng, hidden_dim),
            },
        }
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            RankHead::Pointwise { .. } => HeadKind::Pointwise,
            RankHead::Bertlets { .. } => HeadKind::Bertlets,
            RankHead::PairwiseCe { .. } => HeadKind::PairwiseCe,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        match self {
            RankHead::Pointwise { weight, .. } => weight.ncols(),
            RankHead::Bertlets { v } | RankHead::PairwiseCe { v } => v.len(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z
    }

    /// The scoring vector of the pair-wise heads.
    pub fn v(&self) -> Result<&Array1<f64>> {
        match self {
            RankHead::Bertlets { v } | RankHead::PairwiseCe { v } => Ok(v),
            RankHead::Pointwise { .. } => Err(Error::Usage(
                "the point-wise head has no scoring vector".into(),
            )),
        }
    }

    pub fn logits(&self, pooled: &PooledVector) -> Result<[f64; 2]> {
        match self {
            RankHead::Pointwise { weight, bias } => {
                let z = weight.dot(pooled) + bias;
                Ok([z[0], z[1]])
            }
            _ => Err(Error::Usage(format!("{} head has no classifier", self.kind()))),
        }
    }

    /// The head's ranking score: `pooled · v`, or the relevant-label probability.
    pub fn score(&self, pooled: &PooledVector) -> f64 {
        match self {
            RankHead::Bertlets { v } | RankHead::PairwiseCe { v } => pooled.dot(v),
            RankHead::Pointwise { .. } => {
                let [z0, z1] = self.logits(pooled).expect("point-wise head");
                softmax2(z0, z1).1
            }
        }
    }

    /// Accumulates head gradients for `d loss / d score` (pair-wise heads) and
    /// returns the gradient with respect to the pooled vector.
    pub fn backward_score(
        &self,
        pooled: &PooledVector,
        dscore: f64,
        grads: &mut RankHead,
    ) -> Result<Array1<f64>> {
        let v = self.v()?;
        match grads {
            RankHead::Bertlets { v: gv } | RankHead::PairwiseCe { v: gv } => {
                gv.scaled_add(dscore, pooled)
            }
            RankHead::Pointwise { .. } => return Err(Error::Usage("gradient head mismatch".into())),
        }
        Ok(v * dscore)
    }

    /// Same as [`Self::backward_score`] for the classifier logits.
    pub fn backward_logits(
        &self,
        pooled: &PooledVector,
        dlogits: [f64; 2],
        grads: &mut RankHead,
    ) -> Result<Array1<f64>> {
        let (RankHead::Pointwise { weight, .. }, RankHead::Pointwise { weight: gw, bias: gb }) =
            (self, grads)
        else {
            return Err(Error::Usage("logit gradients need the point-wise head".into()));
        };
        for (r, &d) in dlogits.iter().enumerate() {
            gw.row_mut(r).scaled_add(d, pooled);
            gb[r] += d;
        }
        Ok(&weight.row(0) * dlogits[0] + &weight.row(1) * dlogits[1])
    }
}

impl ParamSet for RankHead {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        match self {
            RankHead::Pointwise { weight, bias } => {
                vec![mat_ref("head.W_cls", weight), vec_ref("head.b_cls", bias)]
            }
            RankHead::Bertlets { v } | RankHead::PairwiseCe { v } => vec![vec_ref("head.v", v)],
        }
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        match self {
            RankHead::Pointwise { weight, bias } => {
                vec![mat_mut("head.W_cls", weight), vec_mut("head.b_cls", bias)]
            }
            RankHead::Bertlets { v } | RankHead::PairwiseCe { v } => vec![vec_mut("head.v", v)],
        }
    }
}

/// Relevance score of one encoded pair under a pair-wise head.
pub fn score_pair(encoder: &Encoder, head: &RankHead, pair: &EncodedPair) -> Result<f64> {
    let v = head.v()?;
    Ok(encoder.encode(pair)?.dot(v))
}

/// Probability of the relevant label under the point-wise head.
pub fn pointwise_score(encoder: &Encoder, head: &RankHead, pair: &EncodedPair) -> Result<f64> {
    if head.kind() != HeadKind::Pointwise {
        return Err(Error::Usage(format!("{} head is not a classifier", head.kind())));
    }
    Ok(head.score(&encoder.encode(pair)?))
}

fn softmax2(a: f64, b: f64) -> (f64, f64) {
    let m = a.max(b);
    let ea = (a - m).exp();
    let eb = (b - m).exp();
    let z = ea + eb;
    (ea / z, eb / z)
}

/// Two-way softmax of a positive and a negative score.
pub fn normalize_pair(s_plus: f64, s_minus: f64) -> (f64, f64) {
    let (p, _) = softmax2(s_plus, s_minus);
    // complement keeps the pair summing to one exactly
    (p, 1.0 - p)
}

pub fn hinge_loss(s_hat_plus: f64, s_hat_minus: f64, margin: f64) -> f64 {
    (margin - (s_hat_plus - s_hat_minus)).max(0.0)
}

pub fn nll_loss(s_hat_plus: f64) -> f64 {
    -s_hat_plus.max(f64::MIN_POSITIVE).ln()
}

/// Cross-entropy of `softmax(logits)` against `label`.
pub fn pointwise_loss(logits: [f64; 2], label: u8) -> f64 {
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    lse - logits[usize::from(label != 0)]
}

/// Hinge loss on raw scores and its derivatives `(loss, d/ds⁺, d/ds⁻)`.
pub fn hinge_with_grad(s_plus: f64, s_minus: f64, margin: f64) -> (f64, f64, f64) {
    let (hp, hm) = normalize_pair(s_plus, s_minus);
    let loss = hinge_loss(hp, hm, margin);
    if loss > 0.0 {
        // ŝ⁺ - ŝ⁻ = 2σ(s⁺ - s⁻) - 1
        let d = 2.0 * hp * hm;
        (loss, -d, d)
    } else {
        (0.0, 0.0, 0.0)
    }
}

/// `-ln ŝ⁺` on raw scores, computed as `softplus(s⁻ - s⁺)`, with derivatives.
pub fn nll_with_grad(s_plus: f64, s_minus: f64) -> (f64, f64, f64) {
    let x = s_minus - s_plus;
    let loss = x.max(0.0) + (-x.abs()).exp().ln_1p();
    let (_, hm) = normalize_pair(s_plus, s_minus);
    (loss, -hm, hm)
}

pub fn pointwise_with_grad(logits: [f64; 2], label: u8) -> (f64, [f64; 2]) {
    let (p0, p1) = softmax2(logits[0], logits[1]);
    let target = usize::from(label != 0);
    let mut d = [p0, p1];
    d[target] -= 1.0;
    (pointwise_loss(logits, label), d)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub query_id: String,
    pub positive_passage_id: String,
    pub negative_passage_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PointwiseExample {
    pub query_id: String,
    pub passage_id: String,
    pub label: u8,
}

/// Deals the negatives round-robin over the positives, so each positive is in
/// `⌊n/m⌋` or `⌈n/m⌉` triplets, then keeps at most `cap` triplets per positive by
/// seeded subsampling (original order preserved).
pub fn build_triplets(
    query_id: &str,
    positives: &[String],
    negatives: &[String],
    cap: Option<usize>,
    seed: u64,
) -> Vec<Triplet> {
    if positives.is_empty() || negatives.is_empty() {
        return Vec::new();
    }
    let m = positives.len();
    let mut groups: Vec<Vec<&String>> = vec![Vec::new(); m];
    for (j, neg) in negatives.iter().enumerate() {
        groups[j % m].push(neg);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (pos, negs) in positives.iter().zip(groups) {
        let chosen = subsample(negs, cap, &mut rng);
        out.extend(chosen.into_iter().map(|neg| Triplet {
            query_id: query_id.to_string(),
            positive_passage_id: pos.clone(),
            negative_passage_id: neg.clone(),
        }));
    }
    out
}

/// One labelled example per positive and per negative; negatives are capped at
/// `cap` per positive (at least one positive's worth when there are none).
pub fn build_pointwise_examples(
    query_id: &str,
    positives: &[String],
    negatives: &[String],
    cap: Option<usize>,
    seed: u64,
) -> Vec<PointwiseExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let limit = cap.map(|c| c * positives.len().max(1));
    let negs = subsample(negatives.iter().collect(), limit, &mut rng);
    let example = |pid: &String, label| PointwiseExample {
        query_id: query_id.to_string(),
        passage_id: pid.clone(),
        label,
    };
    positives
        .iter()
        .map(|p| example(p, 1))
        .chain(negs.into_iter().map(|n| example(n, 0)))
        .collect()
}

fn subsample<T>(items: Vec<T>, cap: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<T> {
    match cap {
        Some(c) if items.len() > c => {
            let mut keep: Vec<usize> = sample(rng, items.len(), c).into_vec();
            keep.sort_unstable();
            let mut it = items.into_iter().enumerate();
            let mut out = Vec::with_capacity(c);
            for k in keep {
                for (i, x) in it.by_ref() {
                    if i == k {
                        out.push(x);
                        break;
                    }
                }
            }
            out
        }
        _ => items,
    }
}
