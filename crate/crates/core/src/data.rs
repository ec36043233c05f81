//! Tagged sentences, CoNLL column files, tagging schemes, vocabularies and
//! synthetic task generators.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSentence {
    pub tokens: Vec<String>,
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub indicators: Option<Vec<u8>>,
}

impl TaggedSentence {
    pub fn new(tokens: Vec<String>, labels: Vec<String>, indicators: Option<Vec<u8>>) -> Result<Self> {
        let s = TaggedSentence {
            tokens,
            labels,
            indicators,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::Input("empty sentence".into()));
        }
        if self.labels.len() != self.tokens.len() {
            return Err(Error::Input(format!(
                "{} tokens but {} labels",
                self.tokens.len(),
                self.labels.len()
            )));
        }
        if let Some(ind) = &self.indicators {
            if ind.len() != self.tokens.len() {
                return Err(Error::Input("indicator count differs from token count".into()));
            }
            if ind.iter().any(|&f| f > 1) {
                return Err(Error::Input("indicator flags must be 0 or 1".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Parses whitespace-separated columns. A blank line ends a sentence and
/// lines starting with `-DOCSTART-` are skipped.
pub fn parse_conll(
    text: &str,
    path: &Path,
    token_col: usize,
    tag_col: usize,
    indicator_col: Option<usize>,
) -> Result<Vec<TaggedSentence>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut out = Vec::new();
    let mut cur = TaggedSentence {
        tokens: Vec::new(),
        labels: Vec::new(),
        indicators: indicator_col.map(|_| Vec::new()),
    };
    let mut width = None;
    let mut flush = |cur: &mut TaggedSentence, width: &mut Option<usize>| {
        if !cur.tokens.is_empty() {
            let fresh = TaggedSentence {
                tokens: Vec::new(),
                labels: Vec::new(),
                indicators: indicator_col.map(|_| Vec::new()),
            };
            out.push(std::mem::replace(cur, fresh));
        }
        *width = None;
    };
    let need = token_col.max(tag_col).max(indicator_col.unwrap_or(0)) + 1;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() {
            flush(&mut cur, &mut width);
            continue;
        }
        if line.starts_with("-DOCSTART-") {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() < need {
            return Err(err(lineno, format!("expected at least {need} columns, found {}", cols.len())));
        }
        match width {
            None => width = Some(cols.len()),
            Some(w) if w != cols.len() => {
                return Err(err(lineno, format!("row has {} columns, sentence started with {w}", cols.len())));
            }
            _ => {}
        }
        cur.tokens.push(cols[token_col].to_string());
        cur.labels.push(cols[tag_col].to_string());
        if let (Some(c), Some(ind)) = (indicator_col, cur.indicators.as_mut()) {
            let f = match cols[c] {
                "0" => 0,
                "1" => 1,
                other => return Err(err(lineno, format!("indicator must be 0 or 1, found {other:?}"))),
            };
            ind.push(f);
        }
    }
    flush(&mut cur, &mut width);
    Ok(out)
}

pub fn read_conll(path: &Path, token_col: usize, tag_col: usize) -> Result<Vec<TaggedSentence>> {
    parse_conll(&fs::read_to_string(path)?, path, token_col, tag_col, None)
}

/// Token, tag and (when present) indicator columns; one blank line after each sentence.
pub fn format_conll(sentences: &[TaggedSentence]) -> String {
    let mut s = String::new();
    for sent in sentences {
        for i in 0..sent.len() {
            s.push_str(&sent.tokens[i]);
            s.push(' ');
            s.push_str(&sent.labels[i]);
            if let Some(ind) = &sent.indicators {
                s.push(' ');
                s.push_str(if ind[i] == 1 { "1" } else { "0" });
            }
            s.push('\n');
        }
        s.push('\n');
    }
    s
}

pub fn write_conll(path: &Path, sentences: &[TaggedSentence]) -> Result<()> {
    crate::nn::serialize::write_atomic(path, format_conll(sentences).as_bytes())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Bio,
    Bioes,
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bio" | "iob2" => Ok(Scheme::Bio),
            "bioes" | "iobes" => Ok(Scheme::Bioes),
            _ => Err(Error::Config(format!("unknown tagging scheme {s:?}"))),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Bio => "bio",
            Scheme::Bioes => "bioes",
        })
    }
}

impl Scheme {
    /// BIOES if any label carries an `E-` or `S-` prefix, else BIO.
    pub fn detect<'a>(labels: impl IntoIterator<Item = &'a str>) -> Scheme {
        for l in labels {
            if l.starts_with("E-") || l.starts_with("S-") {
                return Scheme::Bioes;
            }
        }
        Scheme::Bio
    }
}

/// Splits `B-LOC` into `('B', "LOC")`; `O` and unprefixed labels give `('O', "")`.
pub fn split_label(label: &str) -> (char, &str) {
    let b = label.as_bytes();
    if b.len() >= 2 && b[1] == b'-' {
        (b[0] as char, &label[2..])
    } else {
        ('O', "")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conversion {
    pub labels: Vec<String>,
    /// Ill-formed labels that had to be reinterpreted.
    pub repairs: usize,
}

pub fn convert_scheme(labels: &[String], from: Scheme, to: Scheme) -> Conversion {
    match (from, to) {
        (Scheme::Bio, Scheme::Bioes) => bio_to_bioes(labels),
        (Scheme::Bioes, Scheme::Bio) => bioes_to_bio(labels),
        _ => Conversion {
            labels: labels.to_vec(),
            repairs: 0,
        },
    }
}

/// `I-X` that does not continue an `X` span is read as `B-X`.
pub fn bio_to_bioes(labels: &[String]) -> Conversion {
    let mut repairs = 0;
    let mut spans: Vec<(char, String)> = Vec::with_capacity(labels.len());
    for (i, l) in labels.iter().enumerate() {
        let (p, t) = split_label(l);
        let entry = match p {
            'B' => ('B', t.to_string()),
            'I' => {
                let continues = i > 0 && {
                    let (pp, pt) = &spans[i - 1];
                    *pp != 'O' && pt == t
                };
                if !continues {
                    repairs += 1;
                    ('B', t.to_string())
                } else {
                    ('I', t.to_string())
                }
            }
            'O' => ('O', String::new()),
            _ => {
                repairs += 1;
                if t.is_empty() {
                    ('O', String::new())
                } else {
                    ('B', t.to_string())
                }
            }
        };
        spans.push(entry);
    }
    let n = spans.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (p, t) = &spans[i];
        let next_continues = i + 1 < n && spans[i + 1].0 == 'I' && spans[i + 1].1 == *t;
        let label = match (*p, next_continues) {
            ('O', _) => "O".to_string(),
            ('B', true) => format!("B-{t}"),
            ('B', false) => format!("S-{t}"),
            ('I', true) => format!("I-{t}"),
            (_, false) => format!("E-{t}"),
            _ => unreachable!(),
        };
        out.push(label);
    }
    Conversion { labels: out, repairs }
}

pub fn bioes_to_bio(labels: &[String]) -> Conversion {
    let mut repairs = 0;
    let labels = labels
        .iter()
        .map(|l| {
            let (p, t) = split_label(l);
            match p {
                'S' | 'B' => format!("B-{t}"),
                'E' | 'I' => format!("I-{t}"),
                'O' => "O".to_string(),
                _ => {
                    repairs += 1;
                    format!("B-{t}")
                }
            }
        })
        .collect();
    Conversion { labels, repairs }
}

pub const UNK: &str = "<unk>";

/// Token and label tables. Token id 0 is reserved for unknown tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabularyTables", into = "VocabularyTables")]
pub struct Vocabulary {
    tokens: Vec<String>,
    labels: Vec<String>,
    token_ids: HashMap<String, usize>,
    label_ids: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyTables {
    tokens: Vec<String>,
    labels: Vec<String>,
}

impl From<VocabularyTables> for Vocabulary {
    fn from(t: VocabularyTables) -> Self {
        Vocabulary::from_tables(t.tokens, t.labels)
    }
}

impl From<Vocabulary> for VocabularyTables {
    fn from(v: Vocabulary) -> Self {
        VocabularyTables {
            tokens: v.tokens,
            labels: v.labels,
        }
    }
}

/// A sentence mapped to ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSentence {
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
    pub indicators: Option<Vec<u8>>,
}

impl EncodedSentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl Vocabulary {
    /// Sorted token and label tables from the training split.
    pub fn build(train: &[TaggedSentence]) -> Self {
        let mut tokens: Vec<String> = train.iter().flat_map(|s| s.tokens.iter().cloned()).collect();
        tokens.sort();
        tokens.dedup();
        tokens.retain(|t| t != UNK);
        tokens.insert(0, UNK.to_string());
        let mut labels: Vec<String> = train.iter().flat_map(|s| s.labels.iter().cloned()).collect();
        labels.sort();
        labels.dedup();
        Vocabulary::from_tables(tokens, labels)
    }

    pub fn from_tables(tokens: Vec<String>, labels: Vec<String>) -> Self {
        let token_ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        let label_ids = labels.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary {
            tokens,
            labels,
            token_ids,
            label_ids,
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token_id(&self, token: &str) -> usize {
        self.token_ids.get(token).copied().unwrap_or(0)
    }

    pub fn label_id(&self, label: &str) -> Result<usize> {
        self.label_ids
            .get(label)
            .copied()
            .ok_or_else(|| Error::Input(format!("label {label:?} not in the label table")))
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn decode_labels(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.labels[i].clone()).collect()
    }

    pub fn encode_tokens(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.token_id(t)).collect()
    }

    pub fn encode(&self, s: &TaggedSentence) -> Result<EncodedSentence> {
        s.validate()?;
        Ok(EncodedSentence {
            tokens: self.encode_tokens(&s.tokens),
            labels: s.labels.iter().map(|l| self.label_id(l)).collect::<Result<_>>()?,
            indicators: s.indicators.clone(),
        })
    }

    pub fn encode_all(&self, ss: &[TaggedSentence]) -> Result<Vec<EncodedSentence>> {
        ss.iter().map(|s| self.encode(s)).collect()
    }
}

pub const MARKER: &str = "!";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LookaheadParams {
    pub n: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a position holds the marker.
    pub p: f64,
    /// How far ahead a marker makes a token `B-PRE`.
    pub window: usize,
    pub seed: u64,
}

impl Default for LookaheadParams {
    fn default() -> Self {
        LookaheadParams {
            n: 1000,
            min_len: 5,
            max_len: 20,
            p: 0.1,
            window: 3,
            seed: 7,
        }
    }
}

fn check_lengths(min_len: usize, max_len: usize) -> Result<()> {
    if min_len == 0 || min_len > max_len {
        return Err(Error::Config(format!("invalid length range {min_len}..={max_len}")));
    }
    Ok(())
}

/// Labels for the lookahead task: the marker is `B-MRK`; a token followed by
/// a marker within `window` positions is `B-PRE`; everything else is `O`.
pub fn lookahead_labels(tokens: &[String], window: usize) -> Vec<String> {
    (0..tokens.len())
        .map(|i| {
            if tokens[i] == MARKER {
                "B-MRK"
            } else if tokens[i + 1..tokens.len().min(i + 1 + window)].iter().any(|t| t == MARKER) {
                "B-PRE"
            } else {
                "O"
            }
            .to_string()
        })
        .collect()
}

pub fn gen_lookahead(params: &LookaheadParams) -> Result<Vec<TaggedSentence>> {
    let LookaheadParams {
        n,
        min_len,
        max_len,
        p,
        window,
        seed,
    } = *params;
    if !(0.0..1.0).contains(&p) || window == 0 {
        return Err(Error::Config(format!("marker probability {p} and window {window} are degenerate")));
    }
    check_lengths(min_len, max_len)?;
    Ok((0..n)
        .map(|i| {
            let mut r = rng(seed.wrapping_add(i as u64));
            let len = r.random_range(min_len..=max_len);
            let tokens: Vec<String> = (0..len)
                .map(|_| {
                    if r.random_bool(p) {
                        MARKER.to_string()
                    } else {
                        ((b'a' + r.random_range(0..26u8)) as char).to_string()
                    }
                })
                .collect();
            let labels = lookahead_labels(&tokens, window);
            TaggedSentence {
                tokens,
                labels,
                indicators: None,
            }
        })
        .collect())
}

/// Labels for the local task: `B-DUP` when a token repeats its predecessor.
pub fn local_labels(tokens: &[String]) -> Vec<String> {
    (0..tokens.len())
        .map(|i| if i > 0 && tokens[i] == tokens[i - 1] { "B-DUP" } else { "O" }.to_string())
        .collect()
}

/// Tokens come from an 8-letter alphabet so that repeats are common.
pub fn gen_local(n: usize, min_len: usize, max_len: usize, seed: u64) -> Result<Vec<TaggedSentence>> {
    check_lengths(min_len, max_len)?;
    Ok((0..n)
        .map(|i| {
            let mut r = rng(seed.wrapping_add(i as u64));
            let len = r.random_range(min_len..=max_len);
            let tokens: Vec<String> = (0..len).map(|_| ((b'a' + r.random_range(0..8u8)) as char).to_string()).collect();
            let labels = local_labels(&tokens);
            TaggedSentence {
                tokens,
                labels,
                indicators: None,
            }
        })
        .collect())
}

/// 80/10/10 split by sentence index.
pub fn split_dataset(data: Vec<TaggedSentence>) -> (Vec<TaggedSentence>, Vec<TaggedSentence>, Vec<TaggedSentence>) {
    let n = data.len();
    let n_train = n * 8 / 10;
    let n_dev = n / 10;
    let mut it = data.into_iter();
    let train = it.by_ref().take(n_train).collect();
    let dev = it.by_ref().take(n_dev).collect();
    (train, dev, it.collect())
}
