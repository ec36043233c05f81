//! Chunk-level precision/recall/F1 with CoNLL-style span extraction.

use serde::{Deserialize, Serialize};

use crate::data::{split_label, Scheme};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub kind: String,
    pub start: usize,
    /// Inclusive.
    pub end: usize,
}

fn ends(prev: char, tag: char, prev_kind: &str, kind: &str) -> bool {
    matches!(prev, 'E' | 'S')
        || (matches!(prev, 'B' | 'I') && matches!(tag, 'B' | 'S' | 'O'))
        || (prev != 'O' && prev_kind != kind)
}

fn starts(prev: char, tag: char, prev_kind: &str, kind: &str) -> bool {
    matches!(tag, 'B' | 'S')
        || (matches!(prev, 'E' | 'S' | 'O') && matches!(tag, 'E' | 'I'))
        || (tag != 'O' && prev_kind != kind)
}

/// Spans in order of appearance. Continuations that cannot continue the
/// current span (e.g. `I-X` after `O`) open a new one.
pub fn extract_spans(labels: &[String], scheme: Scheme) -> Result<Vec<Span>> {
    let mut spans = Vec::new();
    let mut open: Option<(String, usize)> = None;
    let (mut prev, mut prev_kind) = ('O', "");
    for (i, l) in labels.iter().map(String::as_str).chain(std::iter::once("O")).enumerate() {
        let (tag, kind) = split_label(l);
        let allowed = match scheme {
            Scheme::Bio => matches!(tag, 'B' | 'I' | 'O'),
            Scheme::Bioes => matches!(tag, 'B' | 'I' | 'O' | 'E' | 'S'),
        };
        if !allowed {
            return Err(Error::Input(format!("label {l:?} is not valid under {scheme}")));
        }
        if ends(prev, tag, prev_kind, kind) {
            if let Some((k, s)) = open.take() {
                spans.push(Span {
                    kind: k,
                    start: s,
                    end: i - 1,
                });
            }
        }
        if starts(prev, tag, prev_kind, kind) {
            open = Some((kind.to_string(), i));
        }
        prev = tag;
        prev_kind = kind;
    }
    Ok(spans)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl ChunkScores {
    pub fn from_counts(correct: usize, predicted: usize, gold: usize) -> Self {
        if predicted == 0 && gold == 0 {
            return ChunkScores {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
                correct,
                predicted,
                gold,
            };
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(correct, predicted);
        let recall = ratio(correct, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ChunkScores {
            precision,
            recall,
            f1,
            correct,
            predicted,
            gold,
        }
    }
}

fn counts(pred: &[String], gold: &[String], scheme: Scheme) -> Result<(usize, usize, usize)> {
    if pred.len() != gold.len() {
        return Err(Error::Input(format!("{} predicted labels for {} gold", pred.len(), gold.len())));
    }
    let p = extract_spans(pred, scheme)?;
    let g = extract_spans(gold, scheme)?;
    let correct = p.iter().filter(|s| g.contains(s)).count();
    Ok((correct, p.len(), g.len()))
}

pub fn chunk_f1(pred: &[String], gold: &[String], scheme: Scheme) -> Result<ChunkScores> {
    let (c, p, g) = counts(pred, gold, scheme)?;
    Ok(ChunkScores::from_counts(c, p, g))
}

/// Micro-averaged over sentences: span counts are pooled before dividing.
pub fn chunk_f1_corpus(pairs: &[(Vec<String>, Vec<String>)], scheme: Scheme) -> Result<ChunkScores> {
    let (mut c, mut p, mut g) = (0, 0, 0);
    for (pred, gold) in pairs {
        let (a, b, d) = counts(pred, gold, scheme)?;
        c += a;
        p += b;
        g += d;
    }
    Ok(ChunkScores::from_counts(c, p, g))
}
