//! A complete re-ranker: the encoder plus its ranking head, with optional chunk
//! aggregation.

use ndarray::Array1;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Query;
use crate::encoder::{Encoder, EncoderConfig, EncoderParams, PooledVector, SeqCache};
use crate::error::{Error, Result};
use crate::ltr::{HeadKind, RankHead};
use crate::params::{ParamSet, TensorMut, TensorRef};
use crate::segmentation::{
    encode_chunks, max_pool_with_argmax, Aggregator, AttentionCache, AttentionPoolParams,
    SegmentConfig,
};
use crate::tokenizer::{EncodedPair, Vocabulary};

#[derive(Debug, Clone, PartialEq)]
pub struct RankModel {
    pub encoder: Encoder,
    pub head: RankHead,
    pub segmentation: Option<SegmentConfig>,
    /// Present when `segmentation` uses attention aggregation.
    pub attention: Option<AttentionPoolParams>,
}

/// Gradient buffers laid out like the trainable parameters of a [`RankModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub encoder: EncoderParams,
    pub head: RankHead,
    pub attention: Option<AttentionPoolParams>,
}

enum AggCache {
    Single,
    Attention(AttentionCache),
    Max(Vec<usize>),
}

/// Training-mode forward state of one passage (one or more chunks).
pub struct PassageForward {
    pub rep: PooledVector,
    pooled: Vec<PooledVector>,
    caches: Vec<SeqCache>,
    agg: AggCache,
}

impl RankModel {
    /// Fresh model. The head and attention pool draw from seeds derived from the
    /// encoder seed.
    pub fn new(
        config: EncoderConfig,
        head: HeadKind,
        segmentation: Option<SegmentConfig>,
        attention_size: usize,
    ) -> Result<Self> {
        let seed = config.seed;
        let encoder = Encoder::new(config)?;
        let h = encoder.hidden_dim();
        let attention = match segmentation {
            Some(s) if s.aggregator == Aggregator::Attention => Some(AttentionPoolParams::init(
                attention_size,
                h,
                seed.wrapping_add(2),
            )?),
            _ => None,
        };
        let model = RankModel {
            encoder,
            head: RankHead::init(head, h, seed.wrapping_add(1)),
            segmentation,
            attention,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.encoder.hidden_dim();
        if self.head.hidden_dim() != h {
            return Err(Error::Shape(format!(
                "head width {} does not match encoder width {h}",
                self.head.hidden_dim()
            )));
        }
        if let Some(s) = self.segmentation {
            if s.num_chunks == 0 {
                return Err(Error::Config("num_chunks must be at least 1".into()));
            }
            if s.chunk_seq_len > self.encoder.config.max_seq_len {
                return Err(Error::Config(format!(
                    "chunk_seq_len {} exceeds encoder max_seq_len {}",
                    s.chunk_seq_len, self.encoder.config.max_seq_len
                )));
            }
            let needs_attention = s.aggregator == Aggregator::Attention;
            if needs_attention != self.attention.is_some() {
                return Err(Error::Config(
                    "attention-pool parameters must be present exactly when aggregating by attention".into(),
                ));
            }
            if let Some(ap) = &self.attention {
                if ap.projection.ncols() != h {
                    return Err(Error::Shape("attention projection width mismatch".into()));
                }
            }
        } else if self.attention.is_some() {
            return Err(Error::Config("attention-pool parameters without segmentation".into()));
        }
        Ok(())
    }

    pub fn head_kind(&self) -> HeadKind {
        self.head.kind()
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            encoder: self.encoder.params.zeros_like(),
            head: self.head.zeros_like(),
            attention: self.attention.as_ref().map(AttentionPoolParams::zeros_like),
        }
    }

    /// The encoder inputs for one (query, passage): a single pair at `seq_len`,
    /// or one pair per chunk when segmentation is configured.
    pub fn encode_passage(
        &self,
        vocab: &Vocabulary,
        query: &Query,
        passage_id: &str,
        passage_text: &str,
        seq_len: usize,
    ) -> Result<Vec<EncodedPair>> {
        match self.segmentation {
            Some(s) => encode_chunks(vocab, query, passage_id, passage_text, s.num_chunks, s.chunk_seq_len),
            None => Ok(vec![vocab.encode_pair(&query.id, &query.text, passage_text, seq_len)?]),
        }
    }

    fn aggregate(&self, pooled: &[PooledVector]) -> Result<(PooledVector, AggCache)> {
        match self.segmentation {
            None => {
                if pooled.len() != 1 {
                    return Err(Error::Shape(format!(
                        "unsegmented model got {} chunks",
                        pooled.len()
                    )));
                }
                Ok((pooled[0].clone(), AggCache::Single))
            }
            Some(s) => match s.aggregator {
                Aggregator::Attention => {
                    let ap = self.attention.as_ref().ok_or_else(|| {
                        Error::State("attention aggregation without parameters".into())
                    })?;
                    let (v, c) = ap.forward(pooled)?;
                    Ok((v, AggCache::Attention(c)))
                }
                Aggregator::Max => {
                    let (v, arg) = max_pool_with_argmax(pooled)?;
                    Ok((v, AggCache::Max(arg)))
                }
            },
        }
    }

    /// Inference-mode passage representation.
    pub fn represent(&self, chunks: &[EncodedPair]) -> Result<PooledVector> {
        let pooled = chunks
            .iter()
            .map(|c| self.encoder.encode(c))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.aggregate(&pooled)?.0)
    }

    /// The head's ranking score for one passage.
    pub fn score(&self, chunks: &[EncodedPair]) -> Result<f64> {
        Ok(self.head.score(&self.represent(chunks)?))
    }

    pub fn forward_passage(
        &self,
        chunks: &[EncodedPair],
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<PassageForward> {
        let mut pooled = Vec::with_capacity(chunks.len());
        let mut caches = Vec::with_capacity(chunks.len());
        for c in chunks {
            let (v, cache) = self.encoder.forward_one(c, dropout.as_deref_mut())?;
            pooled.push(v);
            caches.push(cache);
        }
        let (rep, agg) = self.aggregate(&pooled)?;
        Ok(PassageForward {
            rep,
            pooled,
            caches,
            agg,
        })
    }

    /// Backpropagates `d loss / d rep` through aggregation and the encoder.
    pub fn backward_passage(
        &self,
        fwd: &PassageForward,
        drep: &Array1<f64>,
        grads: &mut ModelGrads,
    ) -> Result<()> {
        let dchunks: Vec<Array1<f64>> = match &fwd.agg {
            AggCache::Single => vec![drep.clone()],
            AggCache::Attention(cache) => {
                let ap = self
                    .attention
                    .as_ref()
                    .ok_or_else(|| Error::State("attention parameters missing".into()))?;
                let ga = grads
                    .attention
                    .as_mut()
                    .ok_or_else(|| Error::State("attention gradient buffer missing".into()))?;
                ap.backward(&fwd.pooled, cache, drep, ga)
            }
            AggCache::Max(arg) => {
                let mut d = vec![Array1::zeros(drep.len()); fwd.pooled.len()];
                for (k, &i) in arg.iter().enumerate() {
                    d[i][k] = drep[k];
                }
                d
            }
        };
        for (cache, d) in fwd.caches.iter().zip(&dchunks) {
            let slice = d.as_slice().expect("contiguous gradient");
            self.encoder.backward_one(cache, slice, &mut grads.encoder)?;
        }
        Ok(())
    }
}

impl ParamSet for RankModel {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = self.encoder.params.tensors();
        out.extend(self.head.tensors());
        if let Some(a) = &self.attention {
            out.extend(a.tensors());
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = self.encoder.params.tensors_mut();
        out.extend(self.head.tensors_mut());
        if let Some(a) = &mut self.attention {
            out.extend(a.tensors_mut());
        }
        out
    }

    fn bump_version(&mut self) {
        self.encoder.params.version += 1;
    }
}

impl ParamSet for ModelGrads {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = self.encoder.tensors();
        out.extend(self.head.tensors());
        if let Some(a) = &self.attention {
            out.extend(a.tensors());
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.head.tensors_mut());
        if let Some(a) = &mut self.attention {
            out.extend(a.tensors_mut());
        }
        out
    }
}
