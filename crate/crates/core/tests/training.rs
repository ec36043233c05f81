mod common;

use common::{encoder, sentences, small_config};
use streamtag::arm::{collect_examples, train_arm, ArmConfig, ArmModel, ArmTrainOptions};
use streamtag::encoder::TrainOptions;
use streamtag::nn::{probe_gradients, Adam, Probe, Tape};
use streamtag::{HybridEncoder, UniLayerKind, Vocabulary};

#[test]
fn uni_head_loss_reaches_only_the_uni_head() {
    for kind in [UniLayerKind::CausalAttention, UniLayerKind::Gru] {
        let enc = encoder(2, 2, kind, 1);
        let batch = sentences(4, 10, 2);
        let mut tape = Tape::new();
        let fwd = enc.layout().record(&mut tape, enc.params(), &batch).unwrap();
        let grads = tape.backward(fwd.loss_uni);
        let head = enc.layout().uni_head_params();
        for id in enc.params().ids() {
            let g = grads.param(id);
            if head.contains(&id) {
                assert!(g.unwrap().iter().any(|&v| v != 0.0));
            } else if let Some(g) = g {
                assert!(g.iter().all(|&v| v == 0.0), "{} got gradient", enc.params().name(id));
            }
        }
    }
}

/// Agreement up to 1% or the rounding noise of 32-bit central differences.
fn agrees(p: &Probe) -> bool {
    (p.numeric - p.analytic).abs() <= 1e-2 * p.numeric.abs().max(p.analytic.abs()) + 5e-5
}

#[test]
fn hybrid_gradients_match_finite_differences() {
    for (kind, seed) in [(UniLayerKind::CausalAttention, 3), (UniLayerKind::Gru, 4)] {
        let mut enc = encoder(1, 1, kind, seed);
        let batch = sentences(3, 8, seed);
        let head = enc.layout().uni_head_params();
        let (layout, ps) = enc.split_mut();
        // The bidirectional loss reaches every parameter except the uni head.
        let probes = probe_gradients(ps, 64, 1e-3, seed, |tape, ps| Ok(layout.record(tape, ps, &batch)?.loss_bi)).unwrap();
        assert!(probes.iter().all(agrees), "{kind:?}: {probes:?}");
        // The uni head sees a detached input, so check it on its own loss.
        let ids: Vec<_> = ps.ids().collect();
        for id in ids {
            ps.set_trainable(id, head.contains(&id));
        }
        let probes = probe_gradients(ps, 32, 1e-3, seed, |tape, ps| Ok(layout.record(tape, ps, &batch)?.loss_uni)).unwrap();
        assert!(probes.iter().all(agrees), "{kind:?}: {probes:?}");
    }
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let data = sentences(40, 10, 5);
    let labels: Vec<String> = ["B-A", "B-B", "I-A", "O"].iter().map(|s| s.to_string()).collect();
    let run = || {
        let mut enc = encoder(1, 1, UniLayerKind::CausalAttention, 9);
        let opts = TrainOptions {
            epochs: 3,
            batch_size: 8,
            lr: 3e-3,
            seed: 2,
        };
        let s = enc.fit(&data, &data[..10], &labels, &opts, |_| {}).unwrap();
        (s, enc.checksum())
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert_eq!(a, b);
    assert_eq!(ca, cb);
    assert!(a.epochs[2].loss_bi < a.epochs[0].loss_bi);
    assert!(a.epochs.iter().all(|e| e.loss_bi.is_finite() && e.loss_uni.is_finite()));
}

#[test]
fn train_step_updates_every_parameter_group() {
    let mut enc = encoder(1, 1, UniLayerKind::Gru, 0);
    let before: Vec<Vec<f32>> = enc.params().ids().map(|id| enc.params().data(id).to_vec()).collect();
    enc.train_step(&sentences(4, 6, 1), &Adam::default()).unwrap();
    let ps = enc.params();
    for (id, old) in ps.ids().zip(&before) {
        let name = ps.name(id);
        // Position rows beyond the batch length receive no gradient.
        if name.contains("pos") {
            continue;
        }
        assert_ne!(ps.data(id), old.as_slice(), "{name} unchanged");
    }
}

#[test]
fn encoder_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.json");
    let enc = encoder(2, 1, UniLayerKind::Gru, 8);
    let vocab = Vocabulary::from_tables(vec!["<unk>".into(), "a".into()], vec!["O".into()]);
    enc.save(&path, &vocab).unwrap();
    let (back, v2) = HybridEncoder::load(&path).unwrap();
    assert_eq!(back.checksum(), enc.checksum());
    assert_eq!(back.config(), enc.config());
    assert_eq!(v2, vocab);
    let s = &sentences(1, 9, 4)[0];
    assert_eq!(back.offline_forward(&s.tokens, None).unwrap(), enc.offline_forward(&s.tokens, None).unwrap());
}

#[test]
fn unidirectional_config_with_copied_head_matches_uni_labels() {
    let mut enc = encoder(2, 0, UniLayerKind::CausalAttention, 3);
    let l = enc.layout().clone();
    for (src, dst) in [(l.uni_head.w, l.bi_head.w), (l.uni_head.b.unwrap(), l.bi_head.b.unwrap())] {
        let v = enc.params().data(src).to_vec();
        enc.params_mut().get_mut(dst).data_mut().copy_from_slice(&v);
    }
    for s in sentences(10, 12, 6) {
        let out = enc.offline_forward(&s.tokens, None).unwrap();
        assert_eq!(out.h_bi, out.h_uni);
        assert_eq!(out.bi_labels(), out.uni_labels());
    }
}

#[test]
fn arm_training_leaves_encoder_untouched() {
    let enc = encoder(1, 1, UniLayerKind::CausalAttention, 2);
    let sum = enc.checksum();
    let (_, ex) = collect_examples(&enc, &sentences(20, 10, 3), 3).unwrap();
    for e in &ex {
        assert!(*e.labels.last().unwrap());
        assert_eq!(e.features[0].len(), 3 * 16 + 3 * 2);
    }
    let cfg = ArmConfig { m: 3, hidden: 6, seed: 4 };
    let opts = ArmTrainOptions {
        epochs: 2,
        batch_size: 4,
        lr: 1e-2,
        seed: 1,
    };
    let (a, ra) = train_arm(&enc, &ex, &ex[..5], cfg, &opts).unwrap();
    let (b, rb) = train_arm(&enc, &ex, &ex[..5], cfg, &opts).unwrap();
    assert_eq!(enc.checksum(), sum);
    assert_eq!(ra, rb);
    assert_eq!(a.params().checksum(), b.params().checksum());
    assert!(ra.epoch_losses.iter().all(|l| l.is_finite()));
}

#[test]
fn arm_round_trips_and_rejects_mismatched_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("arm.json");
    let cfg = small_config(1, 1, UniLayerKind::CausalAttention, 0);
    let mut arm = ArmModel::new(&cfg, ArmConfig { m: 2, hidden: 5, seed: 3 }).unwrap();
    arm.post.alpha = 1;
    arm.post.beta = 5;
    arm.save(&path).unwrap();
    let back = ArmModel::load(&path).unwrap();
    assert_eq!(back.params().checksum(), arm.params().checksum());
    assert_eq!(back.post, arm.post);
    assert!(back.check_encoder(&cfg).is_ok());
    let mut wide = cfg.clone();
    wide.d_model = 32;
    assert!(back.check_encoder(&wide).is_err());
    let mut no_bi = cfg;
    no_bi.bi_layers = 0;
    assert!(ArmModel::new(&no_bi, ArmConfig::default()).is_err());
}
