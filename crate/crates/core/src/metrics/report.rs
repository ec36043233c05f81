//! Per-run summary of a set of streaming transcripts.

use serde::{Deserialize, Serialize};

use super::chunk::chunk_f1_corpus;
use super::streaming::{edit_overhead, relative_correctness, streaming_em};
use crate::data::Scheme;
use crate::error::{Error, Result};
use crate::policy::StreamingTranscript;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// Chunk F1 of the final labels, pooled over sentences.
    pub offline_f1: f64,
    pub streaming_em: f64,
    pub eo: f64,
    pub rc: f64,
    pub gflops_per_example: f64,
    pub restarts_per_example: f64,
    pub n_sentences: usize,
}

/// Rounds to `digits` significant digits.
pub fn round_sig(x: f64, digits: i32) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let scale = 10f64.powi(digits - 1 - x.abs().log10().floor() as i32);
    (x * scale).round() / scale
}

/// Streaming metrics are averaged per sentence; `labels` maps label ids to names.
pub fn aggregate_report(transcripts: &[StreamingTranscript], labels: &[String]) -> Result<Report> {
    if transcripts.is_empty() {
        return Err(Error::Input("no transcripts to summarise".into()));
    }
    let scheme = Scheme::detect(labels.iter().map(String::as_str));
    let name = |ids: &[usize]| -> Result<Vec<String>> {
        ids.iter()
            .map(|&i| labels.get(i).cloned().ok_or_else(|| Error::Input(format!("label id {i} out of range"))))
            .collect()
    };
    let mut pairs = Vec::with_capacity(transcripts.len());
    let (mut em, mut eo, mut rc, mut flops, mut restarts) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for tr in transcripts {
        if tr.is_empty() {
            return Err(Error::Input(format!("transcript {} is empty", tr.id)));
        }
        let steps = tr.emitted();
        pairs.push((name(tr.final_labels())?, name(&tr.gold)?));
        em += streaming_em(&steps, &tr.gold)?;
        eo += edit_overhead(&steps);
        rc += relative_correctness(&steps);
        flops += tr.total_flops() as f64;
        restarts += tr.restart_count() as f64;
    }
    let k = transcripts.len() as f64;
    let r = |x: f64| round_sig(x, 6);
    Ok(Report {
        offline_f1: r(chunk_f1_corpus(&pairs, scheme)?.f1),
        streaming_em: r(em / k),
        eo: r(eo / k),
        rc: r(rc / k),
        gflops_per_example: r(flops / k / 1e9),
        restarts_per_example: r(restarts / k),
        n_sentences: transcripts.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::StepRecord;

    #[test]
    fn rounding() {
        assert_eq!(round_sig(0.123456789, 6), 0.123457);
        assert_eq!(round_sig(98765432.1, 6), 98765400.0);
        assert_eq!(round_sig(0.0, 6), 0.0);
        assert_eq!(round_sig(-1.0000004, 6), -1.0);
    }

    fn step(labels: Vec<usize>, restart: bool, flops: u64) -> StepRecord {
        StepRecord {
            uni: *labels.last().unwrap(),
            labels,
            restart,
            flops,
            bi: None,
            events: Vec::new(),
        }
    }

    #[test]
    fn single_transcript() {
        let labels: Vec<String> = ["B-X", "I-X", "O"].iter().map(|s| s.to_string()).collect();
        let tr = StreamingTranscript {
            id: 0,
            tokens: vec![1, 2],
            gold: vec![0, 1],
            steps: vec![step(vec![2], false, 10), step(vec![0, 1], true, 30)],
        };
        let r = aggregate_report(&[tr], &labels).unwrap();
        assert_eq!(r.offline_f1, 1.0);
        assert_eq!(r.streaming_em, 0.5);
        assert_eq!(r.restarts_per_example, 1.0);
        assert_eq!(r.gflops_per_example, 4e-8);
        assert_eq!(r.n_sentences, 1);
        assert!(aggregate_report(&[], &labels).is_err());
    }
}
