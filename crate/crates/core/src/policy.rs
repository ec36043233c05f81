//! Waited restarts: at each new token either recompute the bidirectional
//! layers over the whole prefix, or keep the previous labels and append the
//! unidirectional label of the new token.

use serde::{Deserialize, Serialize};

use crate::arm::ArmModel;
use crate::data::{EncodedSentence, Vocabulary};
use crate::encoder::{HybridConfig, HybridEncoder};
use crate::error::{Error, Result};
use crate::metrics::flops::{FlopDims, FlopEvent, LayerKind, Role};

#[derive(Clone, Debug)]
pub enum RestartPolicy<'a> {
    EveryStep,
    /// Restart when `t` is a multiple of `k`.
    FixedK(usize),
    Arm(&'a ArmModel),
    /// A precomputed schedule for one sentence (`schedule[t-1]` for timestep `t`).
    Oracle(Vec<bool>),
}

/// One timestep of a stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Emitted labels for tokens `1..=t`.
    pub labels: Vec<usize>,
    pub restart: bool,
    pub flops: u64,
    /// Unidirectional-head label of token `t`.
    pub uni: usize,
    /// Bidirectional labels over the prefix, present when they were computed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bi: Option<Vec<usize>>,
    #[serde(skip)]
    pub events: Vec<FlopEvent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamingTranscript {
    pub id: usize,
    pub tokens: Vec<usize>,
    pub gold: Vec<usize>,
    pub steps: Vec<StepRecord>,
}

impl StreamingTranscript {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn emitted(&self) -> Vec<&[usize]> {
        self.steps.iter().map(|s| s.labels.as_slice()).collect()
    }

    pub fn final_labels(&self) -> &[usize] {
        self.steps.last().map_or(&[], |s| s.labels.as_slice())
    }

    pub fn restarts(&self) -> Vec<bool> {
        self.steps.iter().map(|s| s.restart).collect()
    }

    pub fn restart_count(&self) -> usize {
        self.steps.iter().filter(|s| s.restart).count()
    }

    pub fn total_flops(&self) -> u64 {
        self.steps.iter().map(|s| s.flops).sum()
    }

    pub fn uni_preds(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.uni).collect()
    }

    /// Bidirectional predictions for every prefix; only complete for
    /// transcripts recorded with a restart at every step.
    pub fn bi_preds(&self) -> Result<Vec<Vec<usize>>> {
        self.steps
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.bi.clone()
                    .ok_or_else(|| Error::Input(format!("no bidirectional predictions for prefix {}", i + 1)))
            })
            .collect()
    }

    pub fn to_record(&self, vocab: &Vocabulary) -> TranscriptRecord {
        TranscriptRecord {
            id: self.id,
            tokens: self.tokens.iter().map(|&t| vocab.tokens()[t].clone()).collect(),
            gold: vocab.decode_labels(&self.gold),
            steps: self
                .steps
                .iter()
                .map(|s| StepJson {
                    labels: vocab.decode_labels(&s.labels),
                    restart: s.restart,
                    flops: s.flops,
                    uni: vocab.label(s.uni).to_string(),
                    bi: s.bi.as_ref().map(|b| vocab.decode_labels(b)),
                })
                .collect(),
        }
    }

    pub fn from_record(r: &TranscriptRecord, vocab: &Vocabulary) -> Result<Self> {
        let labels = |ls: &[String]| ls.iter().map(|l| vocab.label_id(l)).collect::<Result<Vec<_>>>();
        Ok(StreamingTranscript {
            id: r.id,
            tokens: vocab.encode_tokens(&r.tokens),
            gold: labels(&r.gold)?,
            steps: r
                .steps
                .iter()
                .map(|s| {
                    Ok(StepRecord {
                        labels: labels(&s.labels)?,
                        restart: s.restart,
                        flops: s.flops,
                        uni: vocab.label_id(&s.uni)?,
                        bi: s.bi.as_deref().map(labels).transpose()?,
                        events: Vec::new(),
                    })
                })
                .collect::<Result<_>>()?,
        })
    }
}

/// Line format of transcript files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub id: usize,
    pub tokens: Vec<String>,
    pub gold: Vec<String>,
    pub steps: Vec<StepJson>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepJson {
    pub labels: Vec<String>,
    pub restart: bool,
    pub flops: u64,
    pub uni: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bi: Option<Vec<String>>,
}

/// FLOP events charged per timestep. Shared by live streaming and replay so
/// both produce identical totals.
#[derive(Clone, Debug, PartialEq)]
pub struct CostModel {
    pub config: HybridConfig,
    /// Score window of the restart classifier (0 without one).
    pub m: usize,
    arm: Option<FlopDims>,
}

impl CostModel {
    pub fn plain(config: &HybridConfig) -> Self {
        CostModel {
            config: config.clone(),
            m: 0,
            arm: None,
        }
    }

    pub fn with_arm(config: &HybridConfig, arm: &ArmModel) -> Self {
        let mut dims = config.flop_dims();
        dims.arm_in = arm.input_dim() as u64;
        dims.arm_hidden = arm.hidden_dim() as u64;
        CostModel {
            config: config.clone(),
            m: arm.m(),
            arm: Some(dims),
        }
    }

    pub fn for_policy(config: &HybridConfig, policy: &RestartPolicy) -> Self {
        match policy {
            RestartPolicy::Arm(a) => CostModel::with_arm(config, a),
            _ => CostModel::plain(config),
        }
    }

    /// `uni_used` is whether the unidirectional label of token `t` ends up
    /// in the emitted sequence. The classifier is not consulted at the
    /// final step, where the restart is forced.
    pub fn step_events(&self, t: usize, n: usize, restart: bool, uni_used: bool) -> Vec<FlopEvent> {
        let mut ev = self.config.extend_events(t, self.m);
        if let (Some(dims), true) = (&self.arm, t < n) {
            ev.push(FlopEvent::new(Role::Arm, LayerKind::ArmStep, 1, dims));
        }
        if uni_used {
            ev.push(self.config.uni_head_event());
        }
        if restart {
            ev.extend(self.config.restart_events(t));
        }
        ev
    }

    /// FLOPs of streaming an `n`-token sentence with a restart at every step.
    pub fn every_step_total(&self, n: usize) -> u64 {
        (1..=n).flat_map(|t| self.step_events(t, n, true, false)).map(|e| e.flops).sum()
    }
}

fn emit(prev: &[usize], restart: bool, bi: Option<&[usize]>, uni: usize, exclude_latest: bool, is_final: bool) -> (Vec<usize>, bool) {
    if restart {
        let mut labels = bi.expect("restart requires bidirectional labels").to_vec();
        let keep_uni = exclude_latest && !is_final;
        if keep_uni {
            *labels.last_mut().expect("non-empty prefix") = uni;
        }
        (labels, keep_uni)
    } else {
        let mut labels = prev.to_vec();
        labels.push(uni);
        (labels, true)
    }
}

/// Streams `sentence` token by token under `policy`. The last step always restarts.
pub fn run_stream(model: &HybridEncoder, policy: &RestartPolicy, sentence: &EncodedSentence, id: usize) -> Result<StreamingTranscript> {
    let n = sentence.len();
    if n == 0 {
        return Err(Error::Input("empty sentence".into()));
    }
    if sentence.labels.len() != n {
        return Err(Error::Input("label count differs from token count".into()));
    }
    if let RestartPolicy::FixedK(0) = policy {
        return Err(Error::Config("fixed restart interval must be at least 1".into()));
    }
    if let RestartPolicy::Oracle(s) = policy {
        if s.len() != n {
            return Err(Error::Input(format!("schedule of {} bits for {n} tokens", s.len())));
        }
    }
    let costs = CostModel::for_policy(model.config(), policy);
    let (mut arm_state, exclude_latest) = match policy {
        RestartPolicy::Arm(a) => {
            a.check_encoder(model.config())?;
            (Some(a.start()), a.post.exclude_latest)
        }
        _ => (None, false),
    };
    let mut state = model.new_state();
    let mut steps: Vec<StepRecord> = Vec::with_capacity(n);
    let mut history = Vec::with_capacity(n);
    for t in 1..=n {
        let flag = sentence.indicators.as_ref().map(|f| f[t - 1]);
        let step = model.stream_extend(&mut state, sentence.tokens[t - 1], flag, costs.m)?;
        let uni = model.predict_uni_label(&step.h_uni)?;
        let restart = if t == n {
            true
        } else {
            match policy {
                RestartPolicy::EveryStep => true,
                RestartPolicy::FixedK(k) => t % k == 0,
                RestartPolicy::Oracle(s) => s[t - 1],
                RestartPolicy::Arm(a) => {
                    let st = arm_state.as_mut().expect("set for arm policies");
                    let p = a.step(&step, st)?;
                    a.post.decide(p, &history)?
                }
            }
        };
        let bi = if restart {
            Some(model.restart_bidirectional(&state)?)
        } else {
            None
        };
        let prev = steps.last().map_or(&[][..], |s| s.labels.as_slice());
        let (labels, uni_used) = emit(prev, restart, bi.as_deref(), uni, exclude_latest, t == n);
        let events = costs.step_events(t, n, restart, uni_used);
        steps.push(StepRecord {
            labels,
            restart,
            flops: events.iter().map(|e| e.flops).sum(),
            uni,
            bi,
            events,
        });
        history.push(restart);
    }
    Ok(StreamingTranscript {
        id,
        tokens: sentence.tokens.clone(),
        gold: sentence.labels.clone(),
        steps,
    })
}

/// Recomputes the emitted sequences and FLOPs of an every-step transcript
/// under another schedule. The final step is always a restart.
pub fn replay_transcript(tr: &StreamingTranscript, schedule: &[bool], costs: &CostModel, exclude_latest: bool) -> Result<StreamingTranscript> {
    let n = tr.len();
    if schedule.len() != n {
        return Err(Error::Input(format!("schedule of {} bits for {n} steps", schedule.len())));
    }
    let bi = tr.bi_preds()?;
    let mut steps: Vec<StepRecord> = Vec::with_capacity(n);
    for t in 1..=n {
        let restart = schedule[t - 1] || t == n;
        let uni = tr.steps[t - 1].uni;
        let prev = steps.last().map_or(&[][..], |s| s.labels.as_slice());
        let b = &bi[t - 1];
        let (labels, uni_used) = emit(prev, restart, Some(b), uni, exclude_latest, t == n);
        let events = costs.step_events(t, n, restart, uni_used);
        steps.push(StepRecord {
            labels,
            restart,
            flops: events.iter().map(|e| e.flops).sum(),
            uni,
            bi: restart.then(|| b.clone()),
            events,
        });
    }
    Ok(StreamingTranscript {
        id: tr.id,
        tokens: tr.tokens.clone(),
        gold: tr.gold.clone(),
        steps,
    })
}

fn check_views<T>(gold: &[T], uni: &[T], bi: &[Vec<T>]) -> Result<()> {
    let n = gold.len();
    if uni.len() != n || bi.len() != n || bi.iter().enumerate().any(|(i, b)| b.len() != i + 1) {
        return Err(Error::Input(format!(
            "views disagree: {n} gold, {} unidirectional, {} bidirectional prefixes",
            uni.len(),
            bi.len()
        )));
    }
    Ok(())
}

/// `π*_t = 1` iff the bidirectional labels at `t` match strictly more gold
/// labels on the prefix than the unidirectional labels do.
pub fn greedy_policy_labels<T: PartialEq>(gold: &[T], uni: &[T], bi: &[Vec<T>]) -> Result<Vec<bool>> {
    check_views(gold, uni, bi)?;
    let mut uni_hits = 0;
    Ok((0..gold.len())
        .map(|t| {
            uni_hits += (uni[t] == gold[t]) as usize;
            let bi_hits = bi[t].iter().zip(gold).filter(|(a, b)| a == b).count();
            uni_hits < bi_hits
        })
        .collect())
}

/// Emitted sequences for a schedule (final step forced), without exclusion.
pub fn apply_schedule<T: Clone>(uni: &[T], bi: &[Vec<T>], schedule: &[bool]) -> Vec<Vec<T>> {
    let n = uni.len();
    let mut out: Vec<Vec<T>> = Vec::with_capacity(n);
    for t in 0..n {
        if schedule[t] || t + 1 == n {
            out.push(bi[t].clone());
        } else {
            let mut v = out.last().cloned().unwrap_or_default();
            v.push(uni[t].clone());
            out.push(v);
        }
    }
    out
}

/// Schedule maximizing the number of timesteps whose emitted sequence equals
/// the gold prefix. Among optimal schedules, prefers fewer restarts, then
/// the lexicographically earliest list of restart times. The final bit is 1.
pub fn oracle_schedule<T: PartialEq>(gold: &[T], uni: &[T], bi: &[Vec<T>]) -> Result<Vec<bool>> {
    check_views(gold, uni, bi)?;
    let n = gold.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    // ok[r]: restarting at r (1-based) emits exactly the gold prefix.
    let ok: Vec<bool> = std::iter::once(true)
        .chain((1..=n).map(|r| bi[r - 1].as_slice() == &gold[..r]))
        .collect();
    // run[p]: length of the run of correct unidirectional labels starting at token p+1.
    let mut run = vec![0usize; n + 1];
    for p in (0..n).rev() {
        run[p] = if uni[p] == gold[p] { run[p + 1] + 1 } else { 0 };
    }
    // best[r] = (score, restarts, restart times) of the best schedule whose
    // latest restart is r; r = 0 stands for the start of the stream.
    let mut best: Vec<Option<(usize, usize, Vec<usize>)>> = vec![None; n + 1];
    best[0] = Some((0, 0, Vec::new()));
    for r in 1..=n {
        let mut cand: Option<(usize, usize, Vec<usize>)> = None;
        for p in 0..r {
            let Some((score, count, times)) = &best[p] else { continue };
            let copied = if ok[p] { run[p].min(r - 1 - p) } else { 0 };
            let s = score + copied + ok[r] as usize;
            let mut ts = times.clone();
            ts.push(r);
            let better = match &cand {
                None => true,
                Some((cs, cc, ct)) => s > *cs || (s == *cs && (count + 1 < *cc || (count + 1 == *cc && ts < *ct))),
            };
            if better {
                cand = Some((s, count + 1, ts));
            }
        }
        best[r] = cand;
    }
    let (_, _, times) = best[n].take().expect("r = n is always reachable");
    let mut sched = vec![false; n];
    for t in times {
        sched[t - 1] = true;
    }
    Ok(sched)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::streaming::streaming_em;

    #[test]
    fn greedy_examples() {
        let gold = [1, 1, 1];
        let uni = [1, 0, 1];
        let bi = vec![vec![1], vec![1, 0], vec![1, 1, 1]];
        assert_eq!(greedy_policy_labels(&gold, &uni, &bi).unwrap(), vec![false, false, true]);
        let same: Vec<Vec<i32>> = (1..=3).map(|t| uni[..t].to_vec()).collect();
        assert_eq!(greedy_policy_labels(&gold, &uni, &same).unwrap(), vec![false; 3]);
        assert!(greedy_policy_labels(&gold, &uni[..2], &bi).is_err());
    }

    #[test]
    fn oracle_extremes() {
        let gold = [0, 1, 0, 1];
        let good: Vec<Vec<i32>> = (1..=4).map(|t| gold[..t].to_vec()).collect();
        let wrong = [9, 9, 9, 9];
        assert_eq!(oracle_schedule(&gold, &wrong, &good).unwrap(), vec![true; 4]);
        assert_eq!(oracle_schedule(&gold, &gold, &good).unwrap(), vec![false, false, false, true]);
    }

    fn brute_force(gold: &[u8], uni: &[u8], bi: &[Vec<u8>]) -> (f64, Vec<bool>) {
        let n = gold.len();
        let mut best: Option<(usize, usize, Vec<usize>)> = None;
        for mask in 0..(1u32 << (n - 1)) {
            let mut s: Vec<bool> = (0..n - 1).map(|i| mask >> i & 1 == 1).collect();
            s.push(true);
            let em = apply_schedule(uni, bi, &s).iter().enumerate().filter(|(t, e)| e[..] == gold[..t + 1]).count();
            let times: Vec<usize> = (0..n).filter(|&i| s[i]).map(|i| i + 1).collect();
            let key = (em, times.len(), times);
            let better = match &best {
                None => true,
                Some(b) => key.0 > b.0 || (key.0 == b.0 && (key.1 < b.1 || (key.1 == b.1 && key.2 < b.2))),
            };
            if better {
                best = Some(key);
            }
        }
        let (em, _, times) = best.unwrap();
        let mut s = vec![false; n];
        for t in times {
            s[t - 1] = true;
        }
        (em as f64 / n as f64, s)
    }

    #[test]
    fn oracle_matches_enumeration() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let n = rng.random_range(1..=8);
            let c = rng.random_range(2..=3u8);
            let gold: Vec<u8> = (0..n).map(|_| rng.random_range(0..c)).collect();
            let noisy = |rng: &mut rand_chacha::ChaCha8Rng, g: u8| if rng.random_bool(0.3) { rng.random_range(0..c) } else { g };
            let uni: Vec<u8> = gold.iter().map(|&g| noisy(&mut rng, g)).collect();
            let bi: Vec<Vec<u8>> = (1..=n).map(|t| gold[..t].iter().map(|&g| noisy(&mut rng, g)).collect()).collect();
            let dp = oracle_schedule(&gold, &uni, &bi).unwrap();
            let (em, sched) = brute_force(&gold, &uni, &bi);
            let got = streaming_em(&apply_schedule(&uni, &bi, &dp), &gold).unwrap();
            assert_eq!(got, em);
            assert_eq!(dp, sched);
        }
    }
}
