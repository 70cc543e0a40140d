//! Training loop and inference-time re-ranking.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Query};
use crate::encoder::dropout_rng;
use crate::error::{Error, Result};
use crate::ltr::{
    build_pointwise_examples, build_triplets, hinge_with_grad, nll_with_grad, pointwise_with_grad,
    HeadKind, PointwiseExample, Triplet,
};
use crate::model::{ModelGrads, RankModel};
use crate::optim::Adam;
use crate::params::ParamSet;
use crate::retrieval::Candidates;
use crate::tokenizer::{EncodedPair, Vocabulary};

/// Learning rate used for full-size pretrained encoders. The tiny encoders
/// trained here need a much larger step, see [`TrainConfig::default`].
pub const FULL_SCALE_LEARNING_RATE: f64 = 2e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub margin: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Fraction of all steps spent warming the learning rate up linearly; it
    /// then decays linearly to zero. 0 disables both and keeps it constant.
    pub warmup_fraction: f64,
    pub seq_len: usize,
    /// Negatives kept per positive; `None` keeps all of them.
    pub neg_per_pos_cap: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: 0.2,
            epochs: 3,
            learning_rate: 1e-3,
            batch_size: 16,
            warmup_fraction: 0.1,
            seq_len: 256,
            neg_per_pos_cap: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, max_seq_len: usize) -> Result<()> {
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(Error::Config(format!("margin must be >= 0, got {}", self.margin)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction must be in [0, 1], got {}",
                self.warmup_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.seq_len > max_seq_len {
            return Err(Error::Config(format!(
                "seq_len {} exceeds encoder max_seq_len {max_seq_len}",
                self.seq_len
            )));
        }
        Ok(())
    }
}

/// Learning rate for 0-based `step` out of `total` steps.
pub fn scheduled_lr(cfg: &TrainConfig, step: u64, total: u64) -> f64 {
    if cfg.warmup_fraction <= 0.0 || total == 0 {
        return cfg.learning_rate;
    }
    let warmup = (cfg.warmup_fraction * total as f64).ceil().max(1.0);
    let t = step as f64 + 1.0;
    let factor = if t <= warmup {
        t / warmup
    } else {
        ((total as f64 - t + 1.0) / (total as f64 - warmup + 1.0)).max(0.0)
    };
    cfg.learning_rate * factor
}

/// Derives an independent seed for item `i` of a seeded collection.
pub fn mix_seed(seed: u64, i: u64) -> u64 {
    seed ^ i.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One training example: a triplet for the pair-wise heads, a labelled pair for
/// the point-wise head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrainingUnit {
    Pair(Triplet),
    Single(PointwiseExample),
}

impl TrainingUnit {
    pub fn query_id(&self) -> &str {
        match self {
            TrainingUnit::Pair(t) => &t.query_id,
            TrainingUnit::Single(e) => &e.query_id,
        }
    }

    fn passages(&self) -> Vec<&str> {
        match self {
            TrainingUnit::Pair(t) => vec![&t.positive_passage_id, &t.negative_passage_id],
            TrainingUnit::Single(e) => vec![&e.passage_id],
        }
    }

    fn describe(&self) -> String {
        match self {
            TrainingUnit::Pair(t) => format!(
                "{}:{}>{}",
                t.query_id, t.positive_passage_id, t.negative_passage_id
            ),
            TrainingUnit::Single(e) => format!("{}:{}={}", e.query_id, e.passage_id, e.label),
        }
    }
}

/// Builds training units from each query's candidate pool. Candidates are split
/// into positives and negatives by the dataset's judgments; queries without a
/// retrieved positive contribute nothing.
pub fn build_training_units(
    dataset: &Dataset,
    candidates: &[Candidates],
    kind: HeadKind,
    cap: Option<usize>,
    seed: u64,
) -> Vec<TrainingUnit> {
    let mut units = Vec::new();
    for (i, c) in candidates.iter().enumerate() {
        let (pos, neg): (Vec<String>, Vec<String>) = c
            .passage_ids()
            .map(str::to_string)
            .partition(|p| dataset.is_relevant(&c.query_id, p));
        if pos.is_empty() {
            continue;
        }
        let s = mix_seed(seed, i as u64);
        if kind.is_pairwise() {
            units.extend(
                build_triplets(&c.query_id, &pos, &neg, cap, s)
                    .into_iter()
                    .map(TrainingUnit::Pair),
            );
        } else {
            units.extend(
                build_pointwise_examples(&c.query_id, &pos, &neg, cap, s)
                    .into_iter()
                    .map(TrainingUnit::Single),
            );
        }
    }
    units
}

/// Optimizer state carried across (possibly resumed) training runs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainState {
    pub adam: Adam,
    pub epochs_done: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean unit loss per epoch, in unit order.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
    pub num_units: usize,
}

type PairKey = (String, String);

/// Encodes every (query, passage) pair the units refer to.
pub fn encode_units(
    model: &RankModel,
    vocab: &Vocabulary,
    dataset: &Dataset,
    units: &[TrainingUnit],
    seq_len: usize,
) -> Result<HashMap<PairKey, Vec<EncodedPair>>> {
    let keys: BTreeSet<(&str, &str)> = units
        .iter()
        .flat_map(|u| u.passages().into_iter().map(move |p| (u.query_id(), p)))
        .collect();
    keys.into_par_iter()
        .map(|(q, p)| {
            let query = lookup_query(dataset, q)?;
            let text = lookup_passage(dataset, p)?;
            let enc = model.encode_passage(vocab, query, p, text, seq_len)?;
            Ok(((q.to_string(), p.to_string()), enc))
        })
        .collect()
}

fn lookup_query<'a>(dataset: &'a Dataset, id: &str) -> Result<&'a Query> {
    dataset
        .query(id)
        .ok_or_else(|| Error::Argument(format!("unknown query id {id:?}")))
}

fn lookup_passage<'a>(dataset: &'a Dataset, id: &str) -> Result<&'a str> {
    dataset
        .passage(id)
        .map(|p| p.text.as_str())
        .ok_or_else(|| Error::Argument(format!("unknown passage id {id:?}")))
}

/// Loss and gradients of one unit.
fn unit_step(
    model: &RankModel,
    unit: &TrainingUnit,
    encoded: &HashMap<PairKey, Vec<EncodedPair>>,
    margin: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, ModelGrads)> {
    let get = |p: &str| {
        encoded
            .get(&(unit.query_id().to_string(), p.to_string()))
            .ok_or_else(|| Error::State(format!("pair {}/{p} was not encoded", unit.query_id())))
    };
    let mut grads = model.zero_grads();
    let loss = match unit {
        TrainingUnit::Pair(t) => {
            let fp = model.forward_passage(get(&t.positive_passage_id)?, Some(&mut *rng))?;
            let fm = model.forward_passage(get(&t.negative_passage_id)?, Some(&mut *rng))?;
            let sp = model.head.score(&fp.rep);
            let sm = model.head.score(&fm.rep);
            let (loss, dp, dm) = match model.head_kind() {
                HeadKind::Bertlets => hinge_with_grad(sp, sm, margin),
                HeadKind::PairwiseCe => nll_with_grad(sp, sm),
                HeadKind::Pointwise => {
                    return Err(Error::Usage("triplets need a pair-wise head".into()))
                }
            };
            if dp != 0.0 || dm != 0.0 {
                let drp = model.head.backward_score(&fp.rep, dp, &mut grads.head)?;
                model.backward_passage(&fp, &drp, &mut grads)?;
                let drm = model.head.backward_score(&fm.rep, dm, &mut grads.head)?;
                model.backward_passage(&fm, &drm, &mut grads)?;
            }
            loss
        }
        TrainingUnit::Single(e) => {
            let f = model.forward_passage(get(&e.passage_id)?, Some(&mut *rng))?;
            let logits = model.head.logits(&f.rep)?;
            let (loss, dl) = pointwise_with_grad(logits, e.label);
            let drep = model.head.backward_logits(&f.rep, dl, &mut grads.head)?;
            model.backward_passage(&f, &drep, &mut grads)?;
            loss
        }
    };
    Ok((loss, grads))
}

/// Trains `model` over `units` until `state` has completed `cfg.epochs` epochs.
///
/// Each epoch shuffles the units with a seed derived from `cfg.seed` and the
/// epoch index, and the learning-rate schedule follows the global step, so
/// resuming from a saved `state` continues the same trajectory.
/// Per-unit work runs in parallel; gradients are summed in unit order and
/// averaged over the batch before the Adam step.
pub fn train(
    model: &mut RankModel,
    state: &mut TrainState,
    vocab: &Vocabulary,
    dataset: &Dataset,
    units: &[TrainingUnit],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate(model.encoder.config.max_seq_len)?;
    model.validate()?;
    if units.is_empty() {
        return Err(Error::Training("no training examples".into()));
    }
    let wants_pairs = model.head_kind().is_pairwise();
    if units.iter().any(|u| matches!(u, TrainingUnit::Pair(_)) != wants_pairs) {
        return Err(Error::Usage(format!(
            "training units do not match the {} head",
            model.head_kind()
        )));
    }
    let encoded = encode_units(model, vocab, dataset, units, cfg.seq_len)?;
    let steps_per_epoch = units.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    while state.epochs_done < cfg.epochs {
        let epoch = state.epochs_done as u64;
        let epoch_seed = mix_seed(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..units.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let mut losses = vec![0.0; units.len()];
        for batch in order.chunks(cfg.batch_size) {
            let model_ref: &RankModel = model;
            let results: Vec<Result<(f64, ModelGrads)>> = batch
                .par_iter()
                .map(|&u| {
                    let mut rng = dropout_rng(epoch_seed, u as u64);
                    unit_step(model_ref, &units[u], &encoded, cfg.margin, &mut rng)
                })
                .collect();
            let mut total: Option<ModelGrads> = None;
            for (&u, r) in batch.iter().zip(results) {
                let (loss, g) = r?;
                if !loss.is_finite() {
                    let ids: Vec<String> = batch.iter().map(|&i| units[i].describe()).collect();
                    return Err(Error::Training(format!(
                        "non-finite loss at step {} (epoch {}), batch [{}]",
                        state.adam.step + 1,
                        epoch + 1,
                        ids.join(", ")
                    )));
                }
                losses[u] = loss;
                match &mut total {
                    None => total = Some(g),
                    Some(t) => t.add_assign(&g),
                }
            }
            let mut grads = total.expect("non-empty batch");
            grads.scale(1.0 / batch.len() as f64);
            let lr = scheduled_lr(cfg, state.adam.step, total_steps);
            state.adam.update(model, &grads, lr)?;
        }
        epoch_losses.push(losses.iter().sum::<f64>() / units.len() as f64);
        state.epochs_done += 1;
    }
    Ok(TrainReport {
        epoch_losses,
        steps: state.adam.step,
        num_units: units.len(),
    })
}

/// Scores every candidate and sorts best first. Equal scores keep the
/// first-stage order.
pub fn rank(
    model: &RankModel,
    vocab: &Vocabulary,
    dataset: &Dataset,
    candidates: &Candidates,
    seq_len: usize,
) -> Result<Vec<(String, f64)>> {
    let query = lookup_query(dataset, &candidates.query_id)?;
    let scores = candidates
        .ranked
        .par_iter()
        .map(|(pid, _)| {
            let text = lookup_passage(dataset, pid)?;
            model.score(&model.encode_passage(vocab, query, pid, text, seq_len)?)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut out: Vec<(String, f64)> = candidates
        .ranked
        .iter()
        .map(|(p, _)| p.clone())
        .zip(scores)
        .collect();
    // NaN sorts last; adding 0.0 folds -0.0 into 0.0 so they tie.
    let key = |s: f64| if s.is_nan() { f64::NEG_INFINITY } else { s + 0.0 };
    out.sort_by(|a, b| key(b.1).total_cmp(&key(a.1)));
    Ok(out)
}
