//! Adaptive restart module: a single-layer GRU over per-token features that
//! are available without any bidirectional computation, followed by a
//! linear layer and a sigmoid giving the restart probability.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::EncodedSentence;
use crate::encoder::{HybridConfig, HybridEncoder, StreamStep};
use crate::error::{Error, Result};
use crate::metrics::streaming::streaming_em;
use crate::nn::params::rng;
use crate::nn::serialize::{load_model, save_model};
use crate::nn::tape::{Tape, Var};
use crate::nn::{Adam, Gru, Linear, ParameterSet};
use crate::policy::{greedy_policy_labels, replay_transcript, CostModel, StepRecord, StreamingTranscript};

/// Rules applied on top of the thresholded probability.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostProcess {
    /// Suppress a restart if one happened within the last `alpha` steps (0 disables).
    pub alpha: usize,
    /// Force a restart if none happened within the last `beta` steps.
    pub beta: usize,
    pub tau: f64,
    /// On a restart before the final step, keep the unidirectional label of the newest token.
    pub exclude_latest: bool,
}

impl Default for PostProcess {
    fn default() -> Self {
        PostProcess {
            alpha: 0,
            beta: 10,
            tau: 0.5,
            exclude_latest: false,
        }
    }
}

impl PostProcess {
    pub fn validate(&self) -> Result<()> {
        if self.alpha >= self.beta {
            return Err(Error::Config(format!("alpha {} must be below beta {}", self.alpha, self.beta)));
        }
        Ok(())
    }

    /// Decision at timestep `t = history.len() + 1`.
    pub fn decide(&self, prob: f64, history: &[bool]) -> Result<bool> {
        postprocess_decision(prob, history, self.alpha, self.beta, self.tau)
    }
}

/// The stream start counts as a restart for the `beta` rule: the first
/// forced restart comes at `t = beta + 1` at the latest.
pub fn postprocess_decision(prob: f64, history: &[bool], alpha: usize, beta: usize, tau: f64) -> Result<bool> {
    if alpha >= beta {
        return Err(Error::Config(format!("alpha {alpha} must be below beta {beta}")));
    }
    let t = history.len() + 1;
    let last = history.iter().rposition(|&r| r).map_or(0, |i| i + 1);
    if t - last > beta {
        return Ok(true);
    }
    if alpha > 0 && last > 0 && t - last <= alpha {
        return Ok(false);
    }
    Ok(prob >= tau)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LintViolation {
    /// No restart at `t` although none happened in the `beta` steps before it.
    TooInfrequent { t: usize },
    /// Restarts at `first` and `second` are within `alpha` of each other.
    TooFrequent { first: usize, second: usize },
}

/// Checks a restart sequence against the postprocessing guarantee, using the
/// same windows as [`postprocess_decision`]: the `beta` (or `alpha`) steps
/// strictly before `t`, with the stream start counting as a restart.
/// Timesteps are 1-based; the final step may violate the `alpha` rule.
pub fn lint_schedule(restarts: &[bool], alpha: usize, beta: usize) -> Vec<LintViolation> {
    let n = restarts.len();
    let mut out = Vec::new();
    let mut last = 0;
    for t in 1..=n {
        if restarts[t - 1] {
            if alpha > 0 && last > 0 && t - last <= alpha && t != n {
                out.push(LintViolation::TooFrequent { first: last, second: t });
            }
            last = t;
        } else if t - last > beta {
            out.push(LintViolation::TooInfrequent { t });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    /// Number of prior tokens whose attention scores are features.
    pub m: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for ArmConfig {
    fn default() -> Self {
        ArmConfig { m: 8, hidden: 64, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArmHeader {
    config: ArmConfig,
    d_model: usize,
    heads: usize,
    post: PostProcess,
}

const ARM_KIND: &str = "restart-module";

#[derive(Clone, Debug)]
pub struct ArmModel {
    pub config: ArmConfig,
    d_model: usize,
    heads: usize,
    gru: Gru,
    out: Linear,
    params: ParameterSet,
    pub post: PostProcess,
}

/// Recurrent state of one stream.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmState {
    pub h: Vec<f32>,
}

/// `[h_uni, q, k, scores]`.
pub fn extract_features(step: &StreamStep) -> Vec<f32> {
    let mut f = Vec::with_capacity(step.h_uni.len() + step.q.len() + step.k.len() + step.scores.len());
    f.extend_from_slice(&step.h_uni);
    f.extend_from_slice(&step.q);
    f.extend_from_slice(&step.k);
    f.extend_from_slice(&step.scores);
    f
}

fn sigmoid64(x: f32) -> f64 {
    1.0 / (1.0 + (-(x as f64)).exp())
}

impl ArmModel {
    pub fn new(encoder: &HybridConfig, config: ArmConfig) -> Result<Self> {
        if encoder.bi_layers == 0 {
            return Err(Error::Config("restart features need at least one bidirectional layer".into()));
        }
        if config.hidden == 0 {
            return Err(Error::Config("restart module hidden size must be positive".into()));
        }
        let mut params = ParameterSet::new();
        let mut r = rng(config.seed);
        let input = 3 * encoder.d_model + config.m * encoder.heads;
        let gru = Gru::new(&mut params, "arm.gru", input, config.hidden, &mut r);
        let out = Linear::new(&mut params, "arm.out", config.hidden, 1, &mut r);
        Ok(ArmModel {
            config,
            d_model: encoder.d_model,
            heads: encoder.heads,
            gru,
            out,
            params,
            post: PostProcess::default(),
        })
    }

    pub fn m(&self) -> usize {
        self.config.m
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden
    }

    pub fn input_dim(&self) -> usize {
        3 * self.d_model + self.config.m * self.heads
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn check_encoder(&self, encoder: &HybridConfig) -> Result<()> {
        if encoder.d_model != self.d_model || encoder.heads != self.heads || encoder.bi_layers == 0 {
            return Err(Error::Config(format!(
                "restart module expects d_model {} with {} heads and a bidirectional layer",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn start(&self) -> ArmState {
        ArmState {
            h: vec![0.0; self.config.hidden],
        }
    }

    /// Restart probability for one feature vector; advances `state`.
    pub fn forward(&self, features: &[f32], state: &mut ArmState) -> Result<f64> {
        if features.len() != self.input_dim() {
            return Err(Error::Contract(format!(
                "{} features, expected {}",
                features.len(),
                self.input_dim()
            )));
        }
        state.h = self.gru.cell(&self.params, features, &state.h)?;
        let logit = self.out.forward(&self.params, &state.h)[0];
        Ok(sigmoid64(logit))
    }

    pub fn step(&self, step: &StreamStep, state: &mut ArmState) -> Result<f64> {
        self.forward(&extract_features(step), state)
    }

    /// Raw probabilities over a sentence's feature sequence.
    pub fn probabilities(&self, features: &[Vec<f32>]) -> Result<Vec<f64>> {
        let mut st = self.start();
        features.iter().map(|f| self.forward(f, &mut st)).collect()
    }

    /// Mean BCE over the unpadded timesteps of a batch, on a tape.
    pub fn record(&self, tape: &mut Tape, batch: &[&ArmExample]) -> Result<Var> {
        let in_dim = self.input_dim();
        let b = batch.len();
        let len = batch.iter().map(|e| e.len()).max().unwrap_or(0);
        if b == 0 || len == 0 {
            return Err(Error::Input("empty restart-module batch".into()));
        }
        let mut h = tape.constant(b, self.config.hidden, vec![0.0; b * self.config.hidden]);
        let mut logits = Vec::with_capacity(len);
        let mut targets = Vec::with_capacity(len * b);
        let mut mask = Vec::with_capacity(len * b);
        for t in 0..len {
            let mut x = vec![0.0f32; b * in_dim];
            for (i, e) in batch.iter().enumerate() {
                if t < e.len() {
                    x[i * in_dim..(i + 1) * in_dim].copy_from_slice(&e.features[t]);
                    targets.push(if e.labels[t] { 1.0 } else { 0.0 });
                    mask.push(true);
                } else {
                    targets.push(0.0);
                    mask.push(false);
                }
            }
            let xv = tape.constant(b, in_dim, x);
            h = self.gru.tape_step(tape, &self.params, xv, h);
            logits.push(self.out.tape(tape, &self.params, h));
        }
        let all = tape.concat_rows(&logits);
        tape.bce_logits(all, &targets, &mask)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = ArmHeader {
            config: self.config,
            d_model: self.d_model,
            heads: self.heads,
            post: self.post,
        };
        save_model(path, ARM_KIND, &header, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, params): (ArmHeader, ParameterSet) = load_model(path, ARM_KIND)?;
        h.post.validate()?;
        let enc = HybridConfig {
            d_model: h.d_model,
            heads: h.heads,
            bi_layers: 1,
            ..HybridConfig::default()
        };
        let mut model = ArmModel::new(&enc, h.config)?;
        model.params.check_same_layout(&params)?;
        model.params = params;
        model.post = h.post;
        Ok(model)
    }
}

/// Feature sequence and greedy restart labels of one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmExample {
    pub features: Vec<Vec<f32>>,
    pub labels: Vec<bool>,
}

impl ArmExample {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Streams a sentence restarting at every step, recording the transcript
/// together with the restart features of each step.
pub fn record_every_step(encoder: &HybridEncoder, s: &EncodedSentence, id: usize, m: usize) -> Result<(StreamingTranscript, Vec<Vec<f32>>)> {
    let n = s.len();
    if n == 0 {
        return Err(Error::Input("empty sentence".into()));
    }
    let costs = CostModel::plain(encoder.config());
    let mut state = encoder.new_state();
    let mut steps = Vec::with_capacity(n);
    let mut feats = Vec::with_capacity(n);
    for t in 1..=n {
        let flag = s.indicators.as_ref().map(|f| f[t - 1]);
        let step = encoder.stream_extend(&mut state, s.tokens[t - 1], flag, m)?;
        let uni = encoder.predict_uni_label(&step.h_uni)?;
        let bi = encoder.restart_bidirectional(&state)?;
        let events = costs.step_events(t, n, true, false);
        steps.push(StepRecord {
            labels: bi.clone(),
            restart: true,
            flops: events.iter().map(|e| e.flops).sum(),
            uni,
            bi: Some(bi),
            events,
        });
        feats.push(extract_features(&step));
    }
    let tr = StreamingTranscript {
        id,
        tokens: s.tokens.clone(),
        gold: s.labels.clone(),
        steps,
    };
    Ok((tr, feats))
}

/// Greedy restart labels, with the final step labelled 1.
pub fn greedy_targets(tr: &StreamingTranscript) -> Result<Vec<bool>> {
    let mut y = greedy_policy_labels(&tr.gold, &tr.uni_preds(), &tr.bi_preds()?)?;
    if let Some(last) = y.last_mut() {
        *last = true;
    }
    Ok(y)
}

/// Every-step transcripts, features and greedy labels for a dataset.
pub fn collect_examples(encoder: &HybridEncoder, data: &[EncodedSentence], m: usize) -> Result<(Vec<StreamingTranscript>, Vec<ArmExample>)> {
    let mut trs = Vec::with_capacity(data.len());
    let mut exs = Vec::with_capacity(data.len());
    for (i, s) in data.iter().enumerate() {
        let (tr, features) = record_every_step(encoder, s, i, m)?;
        let labels = greedy_targets(&tr)?;
        exs.push(ArmExample { features, labels });
        trs.push(tr);
    }
    Ok((trs, exs))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinaryScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 of the positive (restart) class, pooled over
/// all timesteps. No positives predicted or present gives F1 = 1.
pub fn binary_f1(pred: &[bool], gold: &[bool]) -> BinaryScores {
    let tp = pred.iter().zip(gold).filter(|(p, g)| **p && **g).count() as f64;
    let fp = pred.iter().zip(gold).filter(|(p, g)| **p && !**g).count() as f64;
    let fneg = pred.iter().zip(gold).filter(|(p, g)| !**p && **g).count() as f64;
    if tp + fp + fneg == 0.0 {
        return BinaryScores {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
    }
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    BinaryScores { precision, recall, f1 }
}

/// F1 of thresholded raw probabilities (no postprocessing) against the greedy labels.
pub fn arm_intrinsic_f1(model: &ArmModel, examples: &[ArmExample]) -> Result<f64> {
    let mut pred = Vec::new();
    let mut gold = Vec::new();
    for e in examples {
        for p in model.probabilities(&e.features)? {
            pred.push(p >= model.post.tau);
        }
        gold.extend_from_slice(&e.labels);
    }
    Ok(binary_f1(&pred, &gold).f1)
}

/// F1 of always predicting the more frequent class.
pub fn majority_f1(examples: &[ArmExample]) -> f64 {
    let gold: Vec<bool> = examples.iter().flat_map(|e| e.labels.iter().copied()).collect();
    let pos = gold.iter().filter(|&&g| g).count();
    let majority = 2 * pos >= gold.len();
    binary_f1(&vec![majority; gold.len()], &gold).f1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for ArmTrainOptions {
    fn default() -> Self {
        ArmTrainOptions {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmTrainReport {
    pub epoch_losses: Vec<f32>,
    pub train_f1: f64,
    pub dev_f1: f64,
    pub dev_majority_f1: f64,
    pub dev_positive_rate: f64,
}

/// Fits the classifier to greedy restart labels with binary cross-entropy.
/// The encoder is only read.
pub fn train_arm(
    encoder: &HybridEncoder,
    train: &[ArmExample],
    dev: &[ArmExample],
    config: ArmConfig,
    opts: &ArmTrainOptions,
) -> Result<(ArmModel, ArmTrainReport)> {
    if train.is_empty() {
        return Err(Error::Input("no restart-module training data".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut model = ArmModel::new(encoder.config(), config)?;
    let adam = Adam::with_lr(opts.lr);
    let mut losses = Vec::new();
    for epoch in 1..=opts.epochs {
        let order = crate::encoder::shuffled(train.len(), opts.seed.wrapping_add(epoch as u64));
        let (mut total, mut count) = (0.0f64, 0usize);
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<&ArmExample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let loss = model.record(&mut tape, &batch)?;
            let v = tape.scalar(loss);
            if !v.is_finite() {
                return Err(Error::Numeric(format!("restart-module loss diverged ({v})")));
            }
            total += v as f64 * chunk.len() as f64;
            count += chunk.len();
            tape.backward(loss).accumulate_into(&mut model.params)?;
            adam.step(&mut model.params)?;
        }
        losses.push((total / count as f64) as f32);
    }
    let positives = dev.iter().flat_map(|e| e.labels.iter()).filter(|&&g| g).count();
    let steps: usize = dev.iter().map(|e| e.len()).sum();
    let report = ArmTrainReport {
        epoch_losses: losses,
        train_f1: arm_intrinsic_f1(&model, train)?,
        dev_f1: arm_intrinsic_f1(&model, dev)?,
        dev_majority_f1: majority_f1(dev),
        dev_positive_rate: if steps == 0 { 0.0 } else { positives as f64 / steps as f64 },
    };
    Ok((model, report))
}

pub const GRID: [usize; 6] = [0, 1, 2, 3, 5, 10];

/// Outcome of one postprocessing setting on a development set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub post: PostProcess,
    pub streaming_em: f64,
    pub mean_flops: f64,
}

/// Decisions of the postprocessed classifier for precomputed probabilities;
/// the final step is forced.
pub fn schedule_from_probs(probs: &[f64], post: &PostProcess) -> Result<Vec<bool>> {
    let n = probs.len();
    let mut hist = Vec::with_capacity(n);
    for (i, &p) in probs.iter().enumerate() {
        let r = if i + 1 == n { true } else { post.decide(p, &hist)? };
        hist.push(r);
    }
    Ok(hist)
}

/// Evaluates every `alpha < beta` pair from [`GRID`] with and without
/// `exclude_latest` by replaying every-step transcripts, and returns all
/// points plus the index of the selected one: highest Streaming EM, then
/// fewest mean FLOPs, then grid order.
pub fn select_postprocess(
    model: &ArmModel,
    encoder: &HybridConfig,
    transcripts: &[StreamingTranscript],
    features: &[Vec<Vec<f32>>],
) -> Result<(Vec<GridPoint>, usize)> {
    if transcripts.is_empty() || transcripts.len() != features.len() {
        return Err(Error::Input("grid selection needs one feature sequence per transcript".into()));
    }
    let probs: Vec<Vec<f64>> = features.iter().map(|f| model.probabilities(f)).collect::<Result<_>>()?;
    let costs = CostModel::with_arm(encoder, model);
    let mut points = Vec::new();
    for exclude_latest in [false, true] {
        for &alpha in &GRID {
            for &beta in &GRID {
                if alpha >= beta {
                    continue;
                }
                let post = PostProcess {
                    alpha,
                    beta,
                    tau: model.post.tau,
                    exclude_latest,
                };
                let (mut em, mut flops) = (0.0, 0.0);
                for (tr, p) in transcripts.iter().zip(&probs) {
                    let sched = schedule_from_probs(p, &post)?;
                    let r = replay_transcript(tr, &sched, &costs, exclude_latest)?;
                    em += streaming_em(&r.emitted(), &tr.gold)?;
                    flops += r.total_flops() as f64;
                }
                let k = transcripts.len() as f64;
                points.push(GridPoint {
                    post,
                    streaming_em: em / k,
                    mean_flops: flops / k,
                });
            }
        }
    }
    let mut best = 0;
    for (i, p) in points.iter().enumerate() {
        let b = &points[best];
        if p.streaming_em > b.streaming_em || (p.streaming_em == b.streaming_em && p.mean_flops < b.mean_flops) {
            best = i;
        }
    }
    Ok((points, best))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn postprocess_rules() {
        // beta = 3, last restart 4 steps ago.
        let h = [true, false, false, false];
        assert!(postprocess_decision(0.0, &h, 0, 3, 0.5).unwrap());
        // alpha = 2, restart one step ago.
        assert!(!postprocess_decision(0.99, &[false, true], 2, 5, 0.5).unwrap());
        assert!(!postprocess_decision(0.4, &[false; 3], 0, 10, 0.5).unwrap());
        assert!(postprocess_decision(0.5, &[false; 3], 0, 10, 0.5).unwrap());
        assert!(matches!(postprocess_decision(0.5, &[], 3, 3, 0.5), Err(Error::Config(_))));
    }

    #[test]
    fn stream_start_counts_for_beta() {
        let post = PostProcess {
            alpha: 0,
            beta: 2,
            tau: 0.5,
            exclude_latest: false,
        };
        let s = schedule_from_probs(&[0.0; 7], &post).unwrap();
        assert_eq!(s, vec![false, false, true, false, false, true, true]);
        assert!(lint_schedule(&s, 0, 2).is_empty());
    }

    #[test]
    fn linter_flags_both_rules() {
        let v = lint_schedule(&[false, false, false, false, true], 0, 3);
        assert_eq!(v, vec![LintViolation::TooInfrequent { t: 4 }]);
        assert!(lint_schedule(&[false, false, false, true], 0, 3).is_empty());
        let v = lint_schedule(&[true, true, false, false, true], 1, 10);
        assert_eq!(v, vec![LintViolation::TooFrequent { first: 1, second: 2 }]);
        assert!(lint_schedule(&[false, true, true], 1, 10).is_empty());
    }

    #[test]
    fn binary_f1_cases() {
        let gold = [true, false, true, false, false];
        assert_eq!(binary_f1(&gold, &gold).f1, 1.0);
        let all = binary_f1(&[true; 5], &gold);
        assert_eq!(all.recall, 1.0);
        assert!((all.precision - 0.4).abs() < 1e-12);
        assert_eq!(binary_f1(&[false; 3], &[false; 3]).f1, 1.0);
    }

    #[test]
    fn binary_f1_matches_confusion_matrix() {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let pred: Vec<bool> = (0..100).map(|_| r.random_bool(0.4)).collect();
        let gold: Vec<bool> = (0..100).map(|_| r.random_bool(0.5)).collect();
        let mut m = [[0usize; 2]; 2];
        for (p, g) in pred.iter().zip(&gold) {
            m[*p as usize][*g as usize] += 1;
        }
        let (tp, fp, fneg) = (m[1][1] as f64, m[1][0] as f64, m[0][1] as f64);
        let want = 2.0 * tp / (2.0 * tp + fp + fneg);
        assert!((binary_f1(&pred, &gold).f1 - want).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_give_one_half() {
        let enc = HybridConfig {
            d_model: 8,
            heads: 2,
            bi_layers: 1,
            ..HybridConfig::default()
        };
        let mut arm = ArmModel::new(&enc, ArmConfig { m: 4, hidden: 5, seed: 1 }).unwrap();
        assert_eq!(arm.input_dim(), 3 * 8 + 4 * 2);
        for id in arm.params.ids().collect::<Vec<_>>() {
            arm.params.get_mut(id).data_mut().fill(0.0);
        }
        let mut st = arm.start();
        assert_eq!(arm.forward(&vec![0.3; 32], &mut st).unwrap(), 0.5);
    }
}
