//! Compact post-norm transformer cross-encoder with a tanh pooler over the
//! `[CLS]` position, and exact reverse-mode gradients.
//!
//! Matrices are stored `in x out` and applied as `x · W + b` on row vectors.
//! Only the unpadded prefix of a sequence is computed: padded positions are
//! never used as attention keys, and the pooled output reads position 0 only,
//! so dropping them is exact.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{init_matrix, mat_mut, mat_ref, vec_mut, vec_ref, ParamSet, TensorMut, TensorRef};
use crate::tokenizer::EncodedPair;

const LN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)),
            Activation::Relu => x.max(0.0),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + x * pdf
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
    pub seed: u64,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            num_layers: 2,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 256,
            vocab_size: 4096,
            max_seq_len: 128,
            dropout_rate: 0.1,
            seed: 0,
            activation: Activation::Gelu,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 {
            return fail("num_layers must be at least 1".into());
        }
        if self.num_heads == 0 || self.hidden_dim == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.max_seq_len < 8 {
            return fail(format!("max_seq_len {} is below 8", self.max_seq_len));
        }
        if self.ffn_dim < self.hidden_dim {
            return fail(format!(
                "ffn_dim {} is smaller than hidden_dim {}",
                self.ffn_dim, self.hidden_dim
            ));
        }
        if self.vocab_size < 4 {
            return fail(format!("vocab_size {} cannot hold reserved tokens", self.vocab_size));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
}

impl LayerParams {
    fn init<R: Rng>(rng: &mut R, h: usize, f: usize) -> Self {
        LayerParams {
            wq: init_matrix(rng, h, h),
            bq: Array1::zeros(h),
            wk: init_matrix(rng, h, h),
            bk: Array1::zeros(h),
            wv: init_matrix(rng, h, h),
            bv: Array1::zeros(h),
            wo: init_matrix(rng, h, h),
            bo: Array1::zeros(h),
            ln1_gain: Array1::ones(h),
            ln1_bias: Array1::zeros(h),
            w1: init_matrix(rng, h, f),
            b1: Array1::zeros(f),
            w2: init_matrix(rng, f, h),
            b2: Array1::zeros(h),
            ln2_gain: Array1::ones(h),
            ln2_bias: Array1::zeros(h),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    pub segment_embedding: Array2<f64>,
    pub embed_ln_gain: Array1<f64>,
    pub embed_ln_bias: Array1<f64>,
    pub layers: Vec<LayerParams>,
    pub pooler_weight: Array2<f64>,
    pub pooler_bias: Array1<f64>,
    /// Bumped on every optimizer update so stale forward caches are detected.
    pub version: u64,
}

impl EncoderParams {
    pub fn init(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let h = cfg.hidden_dim;
        Ok(EncoderParams {
            token_embedding: init_matrix(&mut rng, cfg.vocab_size, h),
            position_embedding: init_matrix(&mut rng, cfg.max_seq_len, h),
            segment_embedding: init_matrix(&mut rng, 2, h),
            embed_ln_gain: Array1::ones(h),
            embed_ln_bias: Array1::zeros(h),
            layers: (0..cfg.num_layers)
                .map(|_| LayerParams::init(&mut rng, h, cfg.ffn_dim))
                .collect(),
            pooler_weight: init_matrix(&mut rng, h, h),
            pooler_bias: Array1::zeros(h),
            version: 0,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill_zero();
        z.version = 0;
        z
    }
}

impl ParamSet for EncoderParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = vec![
            mat_ref("embed.token", &self.token_embedding),
            mat_ref("embed.position", &self.position_embedding),
            mat_ref("embed.segment", &self.segment_embedding),
            vec_ref("embed.ln.gain", &self.embed_ln_gain),
            vec_ref("embed.ln.bias", &self.embed_ln_bias),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let n = |s: &str| format!("layer{i}.{s}");
            out.extend([
                mat_ref(n("attn.wq"), &l.wq),
                vec_ref(n("attn.bq"), &l.bq),
                mat_ref(n("attn.wk"), &l.wk),
                vec_ref(n("attn.bk"), &l.bk),
                mat_ref(n("attn.wv"), &l.wv),
                vec_ref(n("attn.bv"), &l.bv),
                mat_ref(n("attn.wo"), &l.wo),
                vec_ref(n("attn.bo"), &l.bo),
                vec_ref(n("ln1.gain"), &l.ln1_gain),
                vec_ref(n("ln1.bias"), &l.ln1_bias),
                mat_ref(n("ffn.w1"), &l.w1),
                vec_ref(n("ffn.b1"), &l.b1),
                mat_ref(n("ffn.w2"), &l.w2),
                vec_ref(n("ffn.b2"), &l.b2),
                vec_ref(n("ln2.gain"), &l.ln2_gain),
                vec_ref(n("ln2.bias"), &l.ln2_bias),
            ]);
        }
        out.push(mat_ref("pooler.weight", &self.pooler_weight));
        out.push(vec_ref("pooler.bias", &self.pooler_bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = vec![
            mat_mut("embed.token", &mut self.token_embedding),
            mat_mut("embed.position", &mut self.position_embedding),
            mat_mut("embed.segment", &mut self.segment_embedding),
            vec_mut("embed.ln.gain", &mut self.embed_ln_gain),
            vec_mut("embed.ln.bias", &mut self.embed_ln_bias),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let n = |s: &str| format!("layer{i}.{s}");
            out.extend([
                mat_mut(n("attn.wq"), &mut l.wq),
                vec_mut(n("attn.bq"), &mut l.bq),
                mat_mut(n("attn.wk"), &mut l.wk),
                vec_mut(n("attn.bk"), &mut l.bk),
                mat_mut(n("attn.wv"), &mut l.wv),
                vec_mut(n("attn.bv"), &mut l.bv),
                mat_mut(n("attn.wo"), &mut l.wo),
                vec_mut(n("attn.bo"), &mut l.bo),
                vec_mut(n("ln1.gain"), &mut l.ln1_gain),
                vec_mut(n("ln1.bias"), &mut l.ln1_bias),
                mat_mut(n("ffn.w1"), &mut l.w1),
                vec_mut(n("ffn.b1"), &mut l.b1),
                mat_mut(n("ffn.w2"), &mut l.w2),
                vec_mut(n("ffn.b2"), &mut l.b2),
                vec_mut(n("ln2.gain"), &mut l.ln2_gain),
                vec_mut(n("ln2.bias"), &mut l.ln2_bias),
            ]);
        }
        out.push(mat_mut("pooler.weight", &mut self.pooler_weight));
        out.push(vec_mut("pooler.bias", &mut self.pooler_bias));
        out
    }

    fn bump_version(&mut self) {
        self.version += 1;
    }
}

/// The H-dimensional pooled pair representation.
pub type PooledVector = Array1<f64>;

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

struct LayerCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// One `n x n` row-stochastic matrix per head.
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    attn_drop: Option<Array2<f64>>,
    ln1: LnCache,
    mid: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
    ffn_drop: Option<Array2<f64>>,
    ln2: LnCache,
}

/// Activations kept from one training-mode forward pass over a single sequence.
pub struct SeqCache {
    version: u64,
    token_ids: Vec<usize>,
    segment_ids: Vec<usize>,
    embed_ln: LnCache,
    embed_drop: Option<Array2<f64>>,
    layers: Vec<LayerCache>,
    cls: Array1<f64>,
    pooled: Array1<f64>,
}

impl SeqCache {
    /// Attention probabilities of `layer`, one matrix per head.
    pub fn attention(&self, layer: usize) -> &[Array2<f64>] {
        &self.layers[layer].probs
    }
}

/// Output of [`Encoder::forward_pooled`]; carries caches only in training mode.
pub struct ForwardOutput {
    pub pooled: Vec<PooledVector>,
    caches: Option<Vec<SeqCache>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: EncoderParams,
}

fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let h = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / h;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / h;
        *is = 1.0 / (var + LN_EPS).sqrt();
        let s = *is;
        row.mapv_inplace(|v| v * s);
    }
    let y = &xhat * gain + bias;
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gain: &Array1<f64>,
    dgain: &mut Array1<f64>,
    dbias: &mut Array1<f64>,
) -> Array2<f64> {
    *dgain += &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0));
    let h = dy.ncols() as f64;
    let mut dx = dy * gain;
    for ((mut row, xhat), &is) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let mean_d = row.sum() / h;
        let mean_dx = row.iter().zip(xhat).map(|(d, x)| d * x).sum::<f64>() / h;
        Zip::from(&mut row)
            .and(&xhat)
            .for_each(|d, &x| *d = is * (*d - mean_d - x * mean_dx));
    }
    dx
}

fn dropout_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize, rate: f64) -> Array2<f64> {
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_simple_fn((rows, cols), || {
        if rng.gen::<f64>() < rate {
            0.0
        } else {
            keep
        }
    })
}

fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn add_outer_product(acc: &mut Array2<f64>, x: ArrayView2<f64>, dy: &Array2<f64>) {
    ndarray::linalg::general_mat_mul(1.0, &x.t(), dy, 1.0, acc);
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        let params = EncoderParams::init(&config)?;
        Ok(Encoder { config, params })
    }

    pub fn from_parts(config: EncoderConfig, params: EncoderParams) -> Result<Self> {
        config.validate()?;
        let expect = EncoderParams::init(&EncoderConfig { seed: 0, ..config.clone() })?;
        for (a, b) in expect.tensors().iter().zip(params.tensors()) {
            if a.name != b.name || a.shape != b.shape {
                return Err(Error::Shape(format!(
                    "parameter {} has shape {:?}, config implies {:?}",
                    b.name, b.shape, a.shape
                )));
            }
        }
        if expect.tensors().len() != params.tensors().len() {
            return Err(Error::Shape("parameter count does not match config".into()));
        }
        Ok(Encoder { config, params })
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    fn check_pair(&self, pair: &EncodedPair) -> Result<()> {
        if pair.seq_len > self.config.max_seq_len || pair.token_ids.len() != pair.seq_len {
            return Err(Error::Shape(format!(
                "sequence length {} exceeds encoder max_seq_len {}",
                pair.seq_len, self.config.max_seq_len
            )));
        }
        if let Some(&bad) = pair
            .token_ids
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::Shape(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        if pair.is_empty() {
            return Err(Error::Shape("pair has no unmasked positions".into()));
        }
        Ok(())
    }

    /// Encodes one pair. With `dropout` set, dropout masks are drawn from it.
    pub fn forward_one(
        &self,
        pair: &EncodedPair,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(PooledVector, SeqCache)> {
        self.check_pair(pair)?;
        let cfg = &self.config;
        let p = &self.params;
        let n = pair.len();
        let h = cfg.hidden_dim;
        let rate = cfg.dropout_rate;
        let mut drop = |rows: usize, cols: usize| match dropout.as_deref_mut() {
            Some(rng) if rate > 0.0 => Some(dropout_mask(rng, rows, cols, rate)),
            _ => None,
        };

        let token_ids: Vec<usize> = pair.token_ids[..n].iter().map(|&t| t as usize).collect();
        let segment_ids: Vec<usize> = pair.segment_ids[..n].iter().map(|&s| s as usize).collect();
        let mut emb = Array2::zeros((n, h));
        for (i, mut row) in emb.rows_mut().into_iter().enumerate() {
            row += &p.token_embedding.row(token_ids[i]);
            row += &p.position_embedding.row(i);
            row += &p.segment_embedding.row(segment_ids[i]);
        }
        let (mut x, embed_ln) = layer_norm(&emb, &p.embed_ln_gain, &p.embed_ln_bias);
        let embed_drop = drop(n, h);
        if let Some(m) = &embed_drop {
            x *= m;
        }

        let d = cfg.head_dim();
        let scale = 1.0 / (d as f64).sqrt();
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for lp in &p.layers {
            let q = x.dot(&lp.wq) + &lp.bq;
            let k = x.dot(&lp.wk) + &lp.bk;
            let v = x.dot(&lp.wv) + &lp.bv;
            let mut ctx = Array2::zeros((n, h));
            let mut probs = Vec::with_capacity(cfg.num_heads);
            for head in 0..cfg.num_heads {
                let cols = s![.., head * d..(head + 1) * d];
                let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                softmax_rows(&mut scores);
                ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
                probs.push(scores);
            }
            let mut attn = ctx.dot(&lp.wo) + &lp.bo;
            let attn_drop = drop(n, h);
            if let Some(m) = &attn_drop {
                attn *= m;
            }
            let (mid, ln1) = layer_norm(&(&x + &attn), &lp.ln1_gain, &lp.ln1_bias);
            let pre_act = mid.dot(&lp.w1) + &lp.b1;
            let act = pre_act.mapv(|z| cfg.activation.apply(z));
            let mut ffn = act.dot(&lp.w2) + &lp.b2;
            let ffn_drop = drop(n, h);
            if let Some(m) = &ffn_drop {
                ffn *= m;
            }
            let (out, ln2) = layer_norm(&(&mid + &ffn), &lp.ln2_gain, &lp.ln2_bias);
            layers.push(LayerCache {
                input: std::mem::replace(&mut x, out),
                q,
                k,
                v,
                probs,
                ctx,
                attn_drop,
                ln1,
                mid,
                pre_act,
                act,
                ffn_drop,
                ln2,
            });
        }

        let cls = x.row(0).to_owned();
        let pooled = (cls.dot(&p.pooler_weight) + &p.pooler_bias).mapv(f64::tanh);
        let cache = SeqCache {
            version: p.version,
            token_ids,
            segment_ids,
            embed_ln,
            embed_drop,
            layers,
            cls,
            pooled: pooled.clone(),
        };
        Ok((pooled, cache))
    }

    /// Inference-mode encoding of a single pair.
    pub fn encode(&self, pair: &EncodedPair) -> Result<PooledVector> {
        self.forward_one(pair, None).map(|(v, _)| v)
    }

    /// Accumulates into `grads` the gradient of a loss whose derivative with
    /// respect to this sequence's pooled output is `upstream`.
    pub fn backward_one(
        &self,
        cache: &SeqCache,
        upstream: &[f64],
        grads: &mut EncoderParams,
    ) -> Result<()> {
        if cache.version != self.params.version {
            return Err(Error::State(format!(
                "forward cache is from parameter version {}, current is {}",
                cache.version, self.params.version
            )));
        }
        let h = self.config.hidden_dim;
        if upstream.len() != h {
            return Err(Error::Shape(format!(
                "upstream gradient has {} components, expected {h}",
                upstream.len()
            )));
        }
        let p = &self.params;
        let n = cache.token_ids.len();

        let dz = Array1::from_iter(
            upstream
                .iter()
                .zip(&cache.pooled)
                .map(|(g, y)| g * (1.0 - y * y)),
        );
        for (i, &c) in cache.cls.iter().enumerate() {
            grads.pooler_weight.row_mut(i).scaled_add(c, &dz);
        }
        grads.pooler_bias += &dz;
        let mut dx = Array2::zeros((n, h));
        dx.row_mut(0).assign(&p.pooler_weight.dot(&dz));

        let d = self.config.head_dim();
        let scale = 1.0 / (d as f64).sqrt();
        for ((lp, lc), lg) in p
            .layers
            .iter()
            .zip(&cache.layers)
            .zip(grads.layers.iter_mut())
            .rev()
        {
            let dres2 = layer_norm_backward(&dx, &lc.ln2, &lp.ln2_gain, &mut lg.ln2_gain, &mut lg.ln2_bias);
            let mut dffn = dres2.clone();
            if let Some(m) = &lc.ffn_drop {
                dffn *= m;
            }
            add_outer_product(&mut lg.w2, lc.act.view(), &dffn);
            lg.b2 += &dffn.sum_axis(Axis(0));
            let mut dpre = dffn.dot(&lp.w2.t());
            Zip::from(&mut dpre)
                .and(&lc.pre_act)
                .for_each(|g, &z| *g *= self.config.activation.derivative(z));
            add_outer_product(&mut lg.w1, lc.mid.view(), &dpre);
            lg.b1 += &dpre.sum_axis(Axis(0));
            let dmid = dres2 + dpre.dot(&lp.w1.t());

            let dres1 = layer_norm_backward(&dmid, &lc.ln1, &lp.ln1_gain, &mut lg.ln1_gain, &mut lg.ln1_bias);
            let mut dattn = dres1.clone();
            if let Some(m) = &lc.attn_drop {
                dattn *= m;
            }
            add_outer_product(&mut lg.wo, lc.ctx.view(), &dattn);
            lg.bo += &dattn.sum_axis(Axis(0));
            let dctx = dattn.dot(&lp.wo.t());

            let mut dq = Array2::zeros((n, h));
            let mut dk = Array2::zeros((n, h));
            let mut dv = Array2::zeros((n, h));
            for (head, probs) in lc.probs.iter().enumerate() {
                let cols = s![.., head * d..(head + 1) * d];
                let dctx_h = dctx.slice(cols);
                let dprobs = dctx_h.dot(&lc.v.slice(cols).t());
                dv.slice_mut(cols).assign(&probs.t().dot(&dctx_h));
                let mut dscores = dprobs;
                for (mut drow, prow) in dscores.rows_mut().into_iter().zip(probs.rows()) {
                    let dot = drow.dot(&prow);
                    Zip::from(&mut drow)
                        .and(&prow)
                        .for_each(|g, &pr| *g = pr * (*g - dot) * scale);
                }
                dq.slice_mut(cols).assign(&dscores.dot(&lc.k.slice(cols)));
                dk.slice_mut(cols).assign(&dscores.t().dot(&lc.q.slice(cols)));
            }
            let x = lc.input.view();
            add_outer_product(&mut lg.wq, x, &dq);
            add_outer_product(&mut lg.wk, x, &dk);
            add_outer_product(&mut lg.wv, x, &dv);
            lg.bq += &dq.sum_axis(Axis(0));
            lg.bk += &dk.sum_axis(Axis(0));
            lg.bv += &dv.sum_axis(Axis(0));
            dx = dres1 + dq.dot(&lp.wq.t()) + dk.dot(&lp.wk.t()) + dv.dot(&lp.wv.t());
        }

        if let Some(m) = &cache.embed_drop {
            dx *= m;
        }
        let demb = layer_norm_backward(
            &dx,
            &cache.embed_ln,
            &p.embed_ln_gain,
            &mut grads.embed_ln_gain,
            &mut grads.embed_ln_bias,
        );
        for (i, row) in demb.rows().into_iter().enumerate() {
            grads.token_embedding.row_mut(cache.token_ids[i]).scaled_add(1.0, &row);
            grads.position_embedding.row_mut(i).scaled_add(1.0, &row);
            grads.segment_embedding.row_mut(cache.segment_ids[i]).scaled_add(1.0, &row);
        }
        Ok(())
    }

    /// Encodes a batch. `train_seed` enables training mode: caches are kept and
    /// dropout masks for item `i` come from stream `i` of a generator seeded with it.
    pub fn forward_pooled(&self, batch: &[EncodedPair], train_seed: Option<u64>) -> Result<ForwardOutput> {
        let results: Vec<Result<(PooledVector, SeqCache)>> = batch
            .par_iter()
            .enumerate()
            .map(|(i, pair)| match train_seed {
                Some(seed) => {
                    let mut rng = dropout_rng(seed, i as u64);
                    self.forward_one(pair, Some(&mut rng))
                }
                None => self.forward_one(pair, None),
            })
            .collect();
        let mut pooled = Vec::with_capacity(batch.len());
        let mut caches = Vec::with_capacity(batch.len());
        for r in results {
            let (v, c) = r?;
            pooled.push(v);
            caches.push(c);
        }
        Ok(ForwardOutput {
            pooled,
            caches: train_seed.map(|_| caches),
        })
    }

    /// Gradients of `Σ_i upstream[i] · pooled[i]` with respect to every parameter.
    pub fn backward(&self, forward: &ForwardOutput, upstream: &[Vec<f64>]) -> Result<EncoderParams> {
        let caches = forward.caches.as_ref().ok_or_else(|| {
            Error::State("backward needs a training-mode forward pass; no cache was kept".into())
        })?;
        if upstream.len() != caches.len() {
            return Err(Error::Shape(format!(
                "{} upstream gradients for a batch of {}",
                upstream.len(),
                caches.len()
            )));
        }
        let parts: Vec<Result<EncoderParams>> = caches
            .par_iter()
            .zip(upstream.par_iter())
            .map(|(c, g)| {
                let mut grads = self.params.zeros_like();
                self.backward_one(c, g, &mut grads)?;
                Ok(grads)
            })
            .collect();
        let mut total = self.params.zeros_like();
        for part in parts {
            total.add_assign(&part?);
        }
        Ok(total)
    }
}

pub fn dropout_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
