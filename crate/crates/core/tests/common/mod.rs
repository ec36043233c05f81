#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use streamtag::data::EncodedSentence;
use streamtag::{HybridConfig, HybridEncoder, UniLayerKind};

pub fn small_config(uni: usize, bi: usize, kind: UniLayerKind, seed: u64) -> HybridConfig {
    HybridConfig {
        uni_layers: uni,
        bi_layers: bi,
        d_model: 16,
        heads: 2,
        ffn: 24,
        vocab_size: 12,
        num_labels: 4,
        max_len: 32,
        uni_kind: kind,
        use_indicators: false,
        seed,
    }
}

pub fn encoder(uni: usize, bi: usize, kind: UniLayerKind, seed: u64) -> HybridEncoder {
    HybridEncoder::new(small_config(uni, bi, kind, seed)).unwrap()
}

/// Random sentences with random labels over the small vocabulary.
pub fn sentences(n: usize, max_len: usize, seed: u64) -> Vec<EncodedSentence> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = r.random_range(1..=max_len);
            EncodedSentence {
                tokens: (0..len).map(|_| r.random_range(0..12)).collect(),
                labels: (0..len).map(|_| r.random_range(0..4)).collect(),
                indicators: None,
            }
        })
        .collect()
}
