//! The synthetic tasks separate what a causal model can learn from what
//! needs future context.

use streamtag::data::{gen_local, gen_lookahead, split_dataset, EncodedSentence, LookaheadParams, TaggedSentence};
use streamtag::encoder::TrainOptions;
use streamtag::{HybridConfig, HybridEncoder, Vocabulary};

fn fit(uni: usize, bi: usize, data: Vec<TaggedSentence>, epochs: usize) -> (HybridEncoder, Vocabulary, Vec<EncodedSentence>) {
    let (train, dev, test) = split_dataset(data);
    let vocab = Vocabulary::build(&train);
    let (train, dev, test) = (vocab.encode_all(&train).unwrap(), vocab.encode_all(&dev).unwrap(), vocab.encode_all(&test).unwrap());
    let mut enc = HybridEncoder::new(HybridConfig {
        uni_layers: uni,
        bi_layers: bi,
        d_model: 32,
        heads: 2,
        ffn: 64,
        vocab_size: vocab.num_tokens(),
        num_labels: vocab.num_labels(),
        max_len: 32,
        ..HybridConfig::default()
    })
    .unwrap();
    let opts = TrainOptions {
        epochs,
        lr: 3e-3,
        ..TrainOptions::default()
    };
    enc.fit(&train, &dev, vocab.labels(), &opts, |_| {}).unwrap();
    (enc, vocab, test)
}

/// Token accuracy of offline predictions at positions whose gold label satisfies `keep`.
fn accuracy(enc: &HybridEncoder, data: &[EncodedSentence], keep: impl Fn(usize) -> bool) -> f64 {
    let (mut right, mut total) = (0usize, 0usize);
    for s in data {
        for (p, g) in enc.predict(s).unwrap().iter().zip(&s.labels) {
            if keep(*g) {
                total += 1;
                right += (p == g) as usize;
            }
        }
    }
    assert!(total > 0);
    right as f64 / total as f64
}

#[test]
fn causal_model_solves_the_local_task() {
    let (enc, _, test) = fit(2, 0, gen_local(5000, 5, 20, 3).unwrap(), 3);
    let acc = accuracy(&enc, &test, |_| true);
    assert!(acc > 0.99, "token accuracy {acc}");
}

#[test]
fn lookahead_needs_bidirectional_layers() {
    let data = gen_lookahead(&LookaheadParams {
        n: 3000,
        ..LookaheadParams::default()
    })
    .unwrap();
    let (uni, vocab, test) = fit(2, 0, data.clone(), 3);
    let (bi, _, _) = fit(0, 2, data, 3);
    let pre = vocab.label_id("B-PRE").unwrap();
    let (u, b) = (accuracy(&uni, &test, |g| g == pre), accuracy(&bi, &test, |g| g == pre));
    assert!(b - u > 0.05, "pre-marker accuracy: causal {u}, bidirectional {b}");
}
