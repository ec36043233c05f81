//! Hybrid encoder: an embedding, `u` causal (cacheable) layers, `b`
//! bidirectional layers, and two linear heads.
//!
//! The unidirectional head reads a detached copy of the last causal layer's
//! output, so its loss only ever trains the head itself.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{EncodedSentence, Scheme, Vocabulary};
use crate::error::{contract, Error, Result};
use crate::metrics::chunk::chunk_f1_corpus;
use crate::metrics::flops::{FlopDims, FlopEvent, LayerKind, Role};
use crate::nn::kernels::{argmax, dot};
use crate::nn::params::rng;
use crate::nn::serialize::{load_model, save_model};
use crate::nn::tape::{Segment, Tape, Var};
use crate::nn::{Adam, Gru, Init, KvCache, Linear, ParamId, ParameterSet, TransformerBlock};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UniLayerKind {
    CausalAttention,
    Gru,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridConfig {
    /// Causal layers after the embedding.
    pub uni_layers: usize,
    /// Bidirectional layers on top of the causal stack.
    pub bi_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    pub num_labels: usize,
    pub max_len: usize,
    pub uni_kind: UniLayerKind,
    /// Adds a learned embedding of a per-token 0/1 flag.
    pub use_indicators: bool,
    pub seed: u64,
}

impl Default for HybridConfig {
    fn default() -> Self {
        HybridConfig {
            uni_layers: 2,
            bi_layers: 2,
            d_model: 64,
            heads: 4,
            ffn: 128,
            vocab_size: 1,
            num_labels: 1,
            max_len: 64,
            uni_kind: UniLayerKind::CausalAttention,
            use_indicators: false,
            seed: 0,
        }
    }
}

impl HybridConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if self.ffn == 0 || self.vocab_size == 0 || self.num_labels == 0 || self.max_len == 0 {
            return bad("ffn, vocab_size, num_labels and max_len must be positive".into());
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.uni_layers + self.bi_layers
    }

    pub fn flop_dims(&self) -> FlopDims {
        FlopDims {
            d: self.d_model as u64,
            ffn: self.ffn as u64,
            labels: self.num_labels as u64,
            arm_in: 0,
            arm_hidden: 0,
        }
    }

    fn uni_step_kind(&self) -> LayerKind {
        match self.uni_kind {
            UniLayerKind::CausalAttention => LayerKind::CausalStep,
            UniLayerKind::Gru => LayerKind::GruStep,
        }
    }

    /// Cost of adding token `t` to the causal stack, including the cached
    /// query/key rows of the first bidirectional layer and, when `m > 0`,
    /// the forward attention scores over the latest `m` tokens.
    pub fn extend_events(&self, t: usize, m: usize) -> Vec<FlopEvent> {
        let dims = self.flop_dims();
        let mut ev: Vec<FlopEvent> = (0..self.uni_layers)
            .map(|_| FlopEvent::new(Role::UniLayer, self.uni_step_kind(), t, &dims))
            .collect();
        if self.bi_layers > 0 {
            ev.push(FlopEvent::new(Role::Features, LayerKind::QkProjection, 1, &dims));
            let prior = (t - 1).min(m);
            if prior > 0 {
                ev.push(FlopEvent::new(Role::Features, LayerKind::ForwardScores, prior, &dims));
            }
        }
        ev
    }

    pub fn uni_head_event(&self) -> FlopEvent {
        FlopEvent::new(Role::UniHead, LayerKind::Linear, 1, &self.flop_dims())
    }

    /// Cost of recomputing the bidirectional layers and head over `t` tokens.
    pub fn restart_events(&self, t: usize) -> Vec<FlopEvent> {
        let dims = self.flop_dims();
        let mut ev: Vec<FlopEvent> = (0..self.bi_layers)
            .map(|i| {
                let kind = if i == 0 {
                    LayerKind::AttentionLayerCachedQk
                } else {
                    LayerKind::AttentionLayer
                };
                FlopEvent::new(Role::BiLayer, kind, t, &dims)
            })
            .collect();
        ev.push(FlopEvent::new(Role::BiHead, LayerKind::Linear, t, &dims));
        ev
    }
}

#[derive(Clone, Copy, Debug)]
pub enum UniLayer {
    Attention(TransformerBlock),
    Gru(Gru),
}

/// Parameter handles of an encoder; the values live in a [`ParameterSet`].
#[derive(Clone, Debug)]
pub struct Layout {
    pub config: HybridConfig,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub ind_emb: Option<ParamId>,
    pub uni: Vec<UniLayer>,
    pub bi: Vec<TransformerBlock>,
    pub uni_head: Linear,
    pub bi_head: Linear,
}

/// Per-position outputs of a full forward pass, all row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutputs {
    pub len: usize,
    pub h_uni: Vec<f32>,
    pub h_bi: Vec<f32>,
    pub uni_logits: Vec<f32>,
    pub bi_logits: Vec<f32>,
    pub num_labels: usize,
}

fn argmax_rows(v: &[f32], c: usize) -> Vec<usize> {
    v.chunks(c).map(argmax).collect()
}

impl EncoderOutputs {
    pub fn uni_labels(&self) -> Vec<usize> {
        argmax_rows(&self.uni_logits, self.num_labels)
    }

    pub fn bi_labels(&self) -> Vec<usize> {
        argmax_rows(&self.bi_logits, self.num_labels)
    }
}

#[derive(Clone, Debug)]
enum LayerCache {
    Kv(KvCache),
    Gru(Vec<f32>),
}

/// Incremental state for one sentence.
#[derive(Clone, Debug)]
pub struct UniState {
    caches: Vec<LayerCache>,
    h_uni: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    len: usize,
    d: usize,
}

impl UniState {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Last causal layer's encoding of every received token.
    pub fn h_uni(&self) -> &[f32] {
        &self.h_uni
    }

    /// Cached query rows of the first bidirectional layer.
    pub fn queries(&self) -> &[f32] {
        &self.q
    }

    pub fn keys(&self) -> &[f32] {
        &self.k
    }

    /// Entries held by each causal layer's cache.
    pub fn cache_lens(&self) -> Vec<usize> {
        self.caches
            .iter()
            .map(|c| match c {
                LayerCache::Kv(kv) => kv.len(),
                LayerCache::Gru(_) => self.len,
            })
            .collect()
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.h_uni[t * self.d..(t + 1) * self.d]
    }
}

/// What [`HybridEncoder::stream_extend`] computes for a new token.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamStep {
    /// 1-based position of the token.
    pub t: usize,
    pub h_uni: Vec<f32>,
    /// Query and key rows of the first bidirectional layer (empty when there is none).
    pub q: Vec<f32>,
    pub k: Vec<f32>,
    /// Unscaled per-head scores `q_i · k_t` for the latest `m` prior tokens,
    /// slot-major (`[m][heads]`), right-aligned, zero where no token exists.
    pub scores: Vec<f32>,
}

/// Tape handles for one training batch.
pub struct TapeForward {
    pub h_uni: Var,
    pub uni_logits: Var,
    pub bi_logits: Var,
    pub loss_bi: Var,
    pub loss_uni: Var,
    pub total: Var,
}

impl Layout {
    pub fn new(config: &HybridConfig, ps: &mut ParameterSet) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut r = rng(c.seed);
        let d = c.d_model;
        let tok_emb = ps.add("embed.tokens", vec![c.vocab_size, d], Init::Uniform, &mut r);
        let pos_emb = ps.add("embed.positions", vec![c.max_len, d], Init::Uniform, &mut r);
        let ind_emb = c
            .use_indicators
            .then(|| ps.add("embed.indicators", vec![2, d], Init::Uniform, &mut r));
        let mut uni = Vec::new();
        for i in 0..c.uni_layers {
            let name = format!("uni.{i}");
            uni.push(match c.uni_kind {
                UniLayerKind::CausalAttention => {
                    UniLayer::Attention(TransformerBlock::new(ps, &name, d, c.heads, c.ffn, &mut r)?)
                }
                UniLayerKind::Gru => UniLayer::Gru(Gru::new(ps, &name, d, d, &mut r)),
            });
        }
        let mut bi = Vec::new();
        for i in 0..c.bi_layers {
            bi.push(TransformerBlock::new(ps, &format!("bi.{i}"), d, c.heads, c.ffn, &mut r)?);
        }
        let uni_head = Linear::new(ps, "head.uni", d, c.num_labels, &mut r);
        let bi_head = Linear::new(ps, "head.bi", d, c.num_labels, &mut r);
        Ok(Layout {
            config: c.clone(),
            tok_emb,
            pos_emb,
            ind_emb,
            uni,
            bi,
            uni_head,
            bi_head,
        })
    }

    fn check_tokens(&self, tokens: &[usize], indicators: Option<&[u8]>) -> Result<()> {
        let c = &self.config;
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > c.max_len {
            return Err(Error::Capacity(format!("{} tokens exceed max length {}", tokens.len(), c.max_len)));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= c.vocab_size) {
            return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", c.vocab_size)));
        }
        if let Some(ind) = indicators {
            if ind.len() != tokens.len() || ind.iter().any(|&f| f > 1) {
                return Err(Error::Input("indicators must be one 0/1 flag per token".into()));
            }
        }
        Ok(())
    }

    fn embed_row(&self, ps: &ParameterSet, token: usize, pos: usize, flag: Option<u8>) -> Vec<f32> {
        let d = self.config.d_model;
        let tok = &ps.data(self.tok_emb)[token * d..(token + 1) * d];
        let p = &ps.data(self.pos_emb)[pos * d..(pos + 1) * d];
        let mut x: Vec<f32> = tok.iter().zip(p).map(|(a, b)| a + b).collect();
        if let Some(id) = self.ind_emb {
            let f = flag.unwrap_or(0) as usize;
            for (o, v) in x.iter_mut().zip(&ps.data(id)[f * d..(f + 1) * d]) {
                *o += v;
            }
        }
        x
    }

    pub fn offline_forward(&self, ps: &ParameterSet, tokens: &[usize], indicators: Option<&[u8]>) -> Result<EncoderOutputs> {
        self.check_tokens(tokens, indicators)?;
        let d = self.config.d_model;
        let mut x = Vec::with_capacity(tokens.len() * d);
        for (i, &tok) in tokens.iter().enumerate() {
            x.extend(self.embed_row(ps, tok, i, indicators.map(|f| f[i])));
        }
        for layer in &self.uni {
            x = match layer {
                UniLayer::Attention(blk) => blk.forward(ps, &x, true, None)?,
                UniLayer::Gru(g) => {
                    let mut h = vec![0.0; d];
                    let mut out = Vec::with_capacity(x.len());
                    for row in x.chunks(d) {
                        h = g.cell(ps, row, &h)?;
                        out.extend_from_slice(&h);
                    }
                    out
                }
            };
        }
        let h_uni = x;
        let mut h = h_uni.clone();
        for blk in &self.bi {
            h = blk.forward(ps, &h, false, None)?;
        }
        Ok(EncoderOutputs {
            len: tokens.len(),
            uni_logits: self.uni_head.forward(ps, &h_uni),
            bi_logits: self.bi_head.forward(ps, &h),
            h_uni,
            h_bi: h,
            num_labels: self.config.num_labels,
        })
    }

    pub fn new_state(&self) -> UniState {
        let d = self.config.d_model;
        UniState {
            caches: self
                .uni
                .iter()
                .map(|l| match l {
                    UniLayer::Attention(_) => LayerCache::Kv(KvCache::new()),
                    UniLayer::Gru(_) => LayerCache::Gru(vec![0.0; d]),
                })
                .collect(),
            h_uni: Vec::new(),
            q: Vec::new(),
            k: Vec::new(),
            len: 0,
            d,
        }
    }

    pub fn stream_extend(&self, ps: &ParameterSet, state: &mut UniState, token: usize, flag: Option<u8>, m: usize) -> Result<StreamStep> {
        let c = &self.config;
        let t = state.len + 1;
        if t > c.max_len {
            return Err(Error::Capacity(format!("stream exceeds max length {}", c.max_len)));
        }
        if token >= c.vocab_size {
            return Err(Error::Input(format!("token id {token} outside vocabulary of {}", c.vocab_size)));
        }
        if flag.is_some_and(|f| f > 1) {
            return Err(Error::Input("indicator flags must be 0 or 1".into()));
        }
        let mut x = self.embed_row(ps, token, t - 1, flag);
        for (layer, cache) in self.uni.iter().zip(&mut state.caches) {
            x = match (layer, cache) {
                (UniLayer::Attention(blk), LayerCache::Kv(kv)) => blk.forward(ps, &x, true, Some(kv))?,
                (UniLayer::Gru(g), LayerCache::Gru(h)) => {
                    *h = g.cell(ps, &x, h)?;
                    h.clone()
                }
                _ => return Err(contract("state does not belong to this encoder")),
            };
        }
        state.h_uni.extend_from_slice(&x);
        let (mut q, mut k, mut scores) = (Vec::new(), Vec::new(), Vec::new());
        if let Some(first) = self.bi.first() {
            (q, k) = first.query_key(ps, &x);
            if m > 0 {
                scores = forward_scores(&state.q, &k, t, m, c.heads);
            }
            state.q.extend_from_slice(&q);
            state.k.extend_from_slice(&k);
        }
        state.len = t;
        Ok(StreamStep {
            t,
            h_uni: x,
            q,
            k,
            scores,
        })
    }

    pub fn uni_logits(&self, ps: &ParameterSet, h_uni_t: &[f32]) -> Result<Vec<f32>> {
        if h_uni_t.len() != self.config.d_model {
            return Err(contract("encoding width differs from d_model"));
        }
        Ok(self.uni_head.forward(ps, h_uni_t))
    }

    pub fn predict_uni_label(&self, ps: &ParameterSet, h_uni_t: &[f32]) -> Result<usize> {
        Ok(argmax(&self.uni_logits(ps, h_uni_t)?))
    }

    /// Bidirectional labels for every token received so far.
    pub fn restart_bidirectional(&self, ps: &ParameterSet, state: &UniState) -> Result<Vec<usize>> {
        if state.is_empty() {
            return Err(contract("restart on an empty stream"));
        }
        let mut h = state.h_uni.clone();
        for (i, blk) in self.bi.iter().enumerate() {
            h = if i == 0 {
                blk.forward_with_qk(ps, &h, state.q.clone(), state.k.clone(), false)?
            } else {
                blk.forward(ps, &h, false, None)?
            };
        }
        Ok(argmax_rows(&self.bi_head.forward(ps, &h), self.config.num_labels))
    }

    /// Records both losses for a batch on `tape`.
    pub fn record(&self, tape: &mut Tape, ps: &ParameterSet, batch: &[EncodedSentence]) -> Result<TapeForward> {
        let c = &self.config;
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut flags = Vec::new();
        let mut labels = Vec::new();
        let mut segments: Vec<Segment> = Vec::new();
        for s in batch {
            self.check_tokens(&s.tokens, s.indicators.as_deref())?;
            if s.labels.len() != s.tokens.len() {
                return Err(Error::Input("label count differs from token count".into()));
            }
            if let Some(&bad) = s.labels.iter().find(|&&l| l >= c.num_labels) {
                return Err(Error::Input(format!("label id {bad} outside {} labels", c.num_labels)));
            }
            segments.push((ids.len(), s.len()));
            ids.extend_from_slice(&s.tokens);
            pos.extend(0..s.len());
            flags.extend((0..s.len()).map(|i| s.indicators.as_ref().map_or(0, |f| f[i] as usize)));
            labels.extend_from_slice(&s.labels);
        }
        let tok = tape.param(ps, self.tok_emb);
        let x = tape.gather(tok, ids);
        let pe = tape.param(ps, self.pos_emb);
        let p = tape.gather(pe, pos);
        let mut x = tape.add(x, p);
        if let Some(id) = self.ind_emb {
            let ie = tape.param(ps, id);
            let f = tape.gather(ie, flags);
            x = tape.add(x, f);
        }
        for layer in &self.uni {
            x = match layer {
                UniLayer::Attention(blk) => blk.tape(tape, ps, x, true, &segments),
                UniLayer::Gru(g) => {
                    let d = c.d_model;
                    let mut rows = Vec::with_capacity(labels.len());
                    for &(start, len) in &segments {
                        let mut h = tape.constant(1, d, vec![0.0; d]);
                        for i in start..start + len {
                            let xi = tape.gather(x, vec![i]);
                            h = g.tape_step(tape, ps, xi, h);
                            rows.push(h);
                        }
                    }
                    tape.concat_rows(&rows)
                }
            };
        }
        let h_uni = x;
        let detached = tape.detach(h_uni);
        let uni_logits = self.uni_head.tape(tape, ps, detached);
        let mut h = h_uni;
        for blk in &self.bi {
            h = blk.tape(tape, ps, h, false, &segments);
        }
        let bi_logits = self.bi_head.tape(tape, ps, h);
        let mask = vec![true; labels.len()];
        let loss_bi = tape.softmax_ce(bi_logits, &labels, &mask)?;
        let loss_uni = tape.softmax_ce(uni_logits, &labels, &mask)?;
        let total = tape.add(loss_bi, loss_uni);
        Ok(TapeForward {
            h_uni,
            uni_logits,
            bi_logits,
            loss_bi,
            loss_uni,
            total,
        })
    }

    pub fn uni_head_params(&self) -> Vec<ParamId> {
        std::iter::once(self.uni_head.w).chain(self.uni_head.b).collect()
    }
}

/// Per-head `q_i · k_t` for the latest `m` tokens before `t`, right-aligned.
pub fn forward_scores(prior_q: &[f32], k_t: &[f32], t: usize, m: usize, heads: usize) -> Vec<f32> {
    let d = k_t.len();
    let dh = d / heads;
    let mut a = vec![0.0; m * heads];
    let first = t.saturating_sub(m).max(1);
    for i in first..t {
        let slot = m - (t - i);
        let q = &prior_q[(i - 1) * d..i * d];
        for h in 0..heads {
            a[slot * heads + h] = dot(&q[h * dh..(h + 1) * dh], &k_t[h * dh..(h + 1) * dh]);
        }
    }
    a
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_bi: f32,
    pub loss_uni: f32,
    pub dev_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub best_epoch: usize,
    pub best_dev_f1: f64,
    pub epochs: Vec<EpochLog>,
}

#[derive(Serialize, Deserialize)]
struct EncoderHeader {
    config: HybridConfig,
    vocabulary: Vocabulary,
}

const ENCODER_KIND: &str = "hybrid-encoder";

#[derive(Clone, Debug)]
pub struct HybridEncoder {
    layout: Layout,
    params: ParameterSet,
}

impl HybridEncoder {
    pub fn new(config: HybridConfig) -> Result<Self> {
        let mut params = ParameterSet::new();
        let layout = Layout::new(&config, &mut params)?;
        Ok(HybridEncoder { layout, params })
    }

    pub fn config(&self) -> &HybridConfig {
        &self.layout.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    /// Structure and mutable values at once (for gradient checks).
    pub fn split_mut(&mut self) -> (&Layout, &mut ParameterSet) {
        (&self.layout, &mut self.params)
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    pub fn offline_forward(&self, tokens: &[usize], indicators: Option<&[u8]>) -> Result<EncoderOutputs> {
        self.layout.offline_forward(&self.params, tokens, indicators)
    }

    pub fn new_state(&self) -> UniState {
        self.layout.new_state()
    }

    pub fn stream_extend(&self, state: &mut UniState, token: usize, flag: Option<u8>, m: usize) -> Result<StreamStep> {
        self.layout.stream_extend(&self.params, state, token, flag, m)
    }

    pub fn restart_bidirectional(&self, state: &UniState) -> Result<Vec<usize>> {
        self.layout.restart_bidirectional(&self.params, state)
    }

    pub fn uni_logits(&self, h_uni_t: &[f32]) -> Result<Vec<f32>> {
        self.layout.uni_logits(&self.params, h_uni_t)
    }

    pub fn predict_uni_label(&self, h_uni_t: &[f32]) -> Result<usize> {
        self.layout.predict_uni_label(&self.params, h_uni_t)
    }

    /// One optimizer step on the summed bidirectional and unidirectional
    /// losses; returns `(loss_bi, loss_uni)` before the update.
    pub fn train_step(&mut self, batch: &[EncodedSentence], adam: &Adam) -> Result<(f32, f32)> {
        let mut tape = Tape::new();
        let fwd = self.layout.record(&mut tape, &self.params, batch)?;
        let (lb, lu) = (tape.scalar(fwd.loss_bi), tape.scalar(fwd.loss_uni));
        if !lb.is_finite() || !lu.is_finite() {
            return Err(Error::Numeric(format!("loss diverged (bi {lb}, uni {lu})")));
        }
        let grads = tape.backward(fwd.total);
        grads.accumulate_into(&mut self.params)?;
        adam.step(&mut self.params)?;
        Ok((lb, lu))
    }

    /// Bidirectional-head labels from a full forward pass.
    pub fn predict(&self, s: &EncodedSentence) -> Result<Vec<usize>> {
        Ok(self.offline_forward(&s.tokens, s.indicators.as_deref())?.bi_labels())
    }

    /// Micro chunk F1 of offline predictions.
    pub fn offline_f1(&self, data: &[EncodedSentence], labels: &[String]) -> Result<f64> {
        let scheme = Scheme::detect(labels.iter().map(String::as_str));
        let mut pairs = Vec::with_capacity(data.len());
        for s in data {
            let pred = self.predict(s)?;
            let name = |ids: &[usize]| ids.iter().map(|&i| labels[i].clone()).collect::<Vec<_>>();
            pairs.push((name(&pred), name(&s.labels)));
        }
        Ok(chunk_f1_corpus(&pairs, scheme)?.f1)
    }

    /// Mini-batch training with a per-epoch shuffle; keeps the parameters of
    /// the epoch with the best dev F1 (earliest on ties).
    pub fn fit(
        &mut self,
        train: &[EncodedSentence],
        dev: &[EncodedSentence],
        labels: &[String],
        opts: &TrainOptions,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<FitSummary> {
        if train.is_empty() {
            return Err(Error::Input("empty training set".into()));
        }
        if opts.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        let adam = Adam::with_lr(opts.lr);
        let mut best: Option<(usize, f64, ParameterSet)> = None;
        let mut logs = Vec::new();
        for epoch in 1..=opts.epochs {
            let order = shuffled(train.len(), opts.seed.wrapping_add(epoch as u64));
            let (mut sb, mut su, mut n) = (0.0f64, 0.0f64, 0usize);
            for chunk in order.chunks(opts.batch_size) {
                let batch: Vec<EncodedSentence> = chunk.iter().map(|&i| train[i].clone()).collect();
                let (lb, lu) = self.train_step(&batch, &adam)?;
                sb += lb as f64 * chunk.len() as f64;
                su += lu as f64 * chunk.len() as f64;
                n += chunk.len();
            }
            let eval_set = if dev.is_empty() { train } else { dev };
            let log = EpochLog {
                epoch,
                loss_bi: (sb / n as f64) as f32,
                loss_uni: (su / n as f64) as f32,
                dev_f1: self.offline_f1(eval_set, labels)?,
            };
            on_epoch(&log);
            if best.as_ref().is_none_or(|b| log.dev_f1 > b.1) {
                best = Some((epoch, log.dev_f1, self.params.clone()));
            }
            logs.push(log);
        }
        let (best_epoch, best_dev_f1) = match best {
            Some((e, f, ps)) => {
                self.params = ps;
                (e, f)
            }
            None => (0, 0.0),
        };
        Ok(FitSummary {
            best_epoch,
            best_dev_f1,
            epochs: logs,
        })
    }

    pub fn save(&self, path: &Path, vocabulary: &Vocabulary) -> Result<()> {
        let header = EncoderHeader {
            config: self.config().clone(),
            vocabulary: vocabulary.clone(),
        };
        save_model(path, ENCODER_KIND, &header, &self.params)
    }

    pub fn load(path: &Path) -> Result<(Self, Vocabulary)> {
        let (header, params): (EncoderHeader, _) = load_model(path, ENCODER_KIND)?;
        let mut model = HybridEncoder::new(header.config)?;
        model.params.check_same_layout(&params)?;
        model.params = params;
        Ok((model, header.vocabulary))
    }
}

/// Fisher–Yates permutation of `0..n`.
pub fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut rng(seed));
    v
}
