mod common;

use common::{sum_all, tiny_config};
use nast_core::augment::feature_time_warp;
use nast_core::autodiff::{Params, Reduction, Tape};
use nast_core::eval::{nmi, speaker_probe, ProbeConfig, Representation};
use nast_core::featureio::{decode_features, encode_features, synthesize_corpus, FeatureSequence, SyntheticSpec};
use nast_core::losses::robustness_on_tape;
use nast_core::model::{gumbel_sample, gumbel_softmax_on_tape, LogitSequence};
use nast_core::tokenize::{dedup, kmeans_fit};
use nast_core::{Matrix, NastConfig, NastModel, UnitSequence};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |v| Matrix::from_vec(rows, cols, v).unwrap())
}

fn frames(t: usize, d: usize, data: &[f64]) -> FeatureSequence {
    FeatureSequence::new("p", t, d, data.iter().map(|&v| v as f32).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn feature_files_round_trip_any_finite_bits(
        t in 1usize..12, d in 1usize..6,
        bits in prop::collection::vec(any::<u32>(), 72),
    ) {
        let data: Vec<f32> = bits
            .iter()
            .cycle()
            .take(t * d)
            .map(|&b| f32::from_bits(b))
            .map(|v| if v.is_finite() { v } else { 0.5 })
            .collect();
        let seq = FeatureSequence::new("x", t, d, data).unwrap();
        let back = decode_features(Path::new("mem"), &encode_features(&seq).unwrap()).unwrap();
        let same = back.data().iter().zip(seq.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
        prop_assert_eq!((back.num_frames(), back.dim()), (t, d));
    }

    #[test]
    fn warp_there_and_back_recovers_a_ramp(t in 4usize..60, rate in 0.8f64..1.2, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let ramp: Vec<f64> = (0..t).map(|i| a + (b - a) * i as f64 / (t - 1) as f64).collect();
        let seq = frames(t, 1, &ramp);
        let back = feature_time_warp(&feature_time_warp(&seq, rate).unwrap(), 1.0 / rate).unwrap();
        let n = back.num_frames();
        prop_assert!(n.abs_diff(t) <= 1);
        for (i, v) in back.data().iter().enumerate() {
            let want = a + (b - a) * i as f64 / (n - 1) as f64;
            prop_assert!((*v as f64 - want).abs() <= 1e-5, "frame {} of {}: {} vs {}", i, n, v, want);
        }
    }

    #[test]
    fn gumbel_rows_are_on_the_simplex(logits in matrix(5, 4), tau in 0.05f64..5.0, seed in any::<u64>(), hard in any::<bool>()) {
        let l = LogitSequence { logits, utterance_id: "g".into() };
        let s = gumbel_sample(&l, tau, &mut ChaCha8Rng::seed_from_u64(seed), hard).unwrap();
        for r in 0..5 {
            let row = s.vectors.row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn hard_index_is_soft_argmax(logits in matrix(6, 4), tau in 0.1f64..3.0, seed in any::<u64>()) {
        let l = LogitSequence { logits, utterance_id: "g".into() };
        let soft = gumbel_sample(&l, tau, &mut ChaCha8Rng::seed_from_u64(seed), false).unwrap();
        let hard = gumbel_sample(&l, tau, &mut ChaCha8Rng::seed_from_u64(seed), true).unwrap();
        prop_assert_eq!(hard.vectors.argmax_rows(), soft.vectors.argmax_rows());
        prop_assert!(hard.vectors.as_slice().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn gumbel_gradient_matches_differences(logits in matrix(2, 4), noise in matrix(2, 4), w in matrix(2, 4), tau in 0.5f64..2.0) {
        let params = Params::new();
        let objective = |l: &Matrix| {
            let mut t = Tape::new(&params);
            let x = t.constant(l.clone());
            let (s, _) = gumbel_softmax_on_tape(&mut t, x, noise.clone(), tau, false);
            t.value(s).as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut t = Tape::new(&params);
        let x = t.leaf(logits.clone());
        let (s, _) = gumbel_softmax_on_tape(&mut t, x, noise.clone(), tau, false);
        let wv = t.constant(w.clone());
        let prod = t.mul(s, wv);
        let total = sum_all(&mut t, prod);
        let grad = t.backward(total).wrt(x).unwrap().clone();
        let h = 1e-5;
        for i in 0..logits.len() {
            let mut p = logits.clone();
            p.as_mut_slice()[i] += h;
            let mut m = logits.clone();
            m.as_mut_slice()[i] -= h;
            let numeric = (objective(&p) - objective(&m)) / (2.0 * h);
            let a = grad.as_slice()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
            prop_assert!(err < 1e-4, "entry {}: analytic {} numeric {}", i, a, numeric);
        }
    }

    #[test]
    fn tau_schedule_is_monotone(start in 0.5f64..5.0, ratio in 1.0f64..20.0, decay in 1u64..5000, a in 0u64..10_000, b in 0u64..10_000) {
        let cfg = NastConfig { tau_start: start, tau_end: start / ratio, tau_decay_steps: decay, ..NastConfig::new(4, 4) };
        let (lo, hi) = (a.min(b), a.max(b));
        prop_assert!(cfg.tau_at(hi) <= cfg.tau_at(lo));
        let want = (start * (-(lo as f64) * ratio.ln() / decay as f64).exp()).max(start / ratio);
        prop_assert!((cfg.tau_at(lo) - want).abs() <= 1e-12 * start);
    }

    #[test]
    fn dedup_is_idempotent_and_never_longer(units in prop::collection::vec(0u32..4, 0..40)) {
        let z = UnitSequence::new("z", units.clone());
        let once = dedup(&z);
        prop_assert_eq!(dedup(&once).units, once.units.clone());
        let has_repeat = units.windows(2).any(|w| w[0] == w[1]);
        prop_assert!(once.len() <= z.len());
        prop_assert_eq!(once.len() == z.len(), !has_repeat);
    }

    #[test]
    fn nmi_is_bounded_and_label_permutation_invariant(
        a in prop::collection::vec(0usize..4, 2..60),
        b_seed in any::<u64>(),
        perm in Just([2usize, 0, 3, 1]),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(b_seed);
        let b: Vec<usize> = a.iter().map(|_| rand::Rng::random_range(&mut rng, 0..3)).collect();
        let v = nmi(&a, &b).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
        let pa: Vec<usize> = a.iter().map(|&x| perm[x]).collect();
        prop_assert!((nmi(&pa, &b).unwrap() - v).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn global_embedding_ignores_frame_order(data in prop::collection::vec(-2.0f64..2.0, 7 * 4), seed in any::<u64>()) {
        let model = NastModel::new(NastConfig { seed, ..tiny_config(4, 3) }).unwrap();
        let seq = frames(7, 4, &data);
        let order = [3usize, 6, 0, 2, 5, 1, 4];
        let shuffled: Vec<f64> = order.iter().flat_map(|&t| data[t * 4..t * 4 + 4].to_vec()).collect();
        let u = model.encode_global(&seq).unwrap().u;
        let v = model.encode_global(&frames(7, 4, &shuffled)).unwrap().u;
        for (x, y) in u.iter().zip(&v) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn lloyd_fixed_points_stay_fixed(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..60 * 2).map(|_| rand::Rng::random_range(&mut rng, -4.0..4.0)).collect();
        let frames = Matrix::from_vec(60, 2, data).unwrap();
        let km = kmeans_fit(&frames, 3, seed, 500, 0.0).unwrap();
        let h = &km.inertia_history;
        prop_assert!(h.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        let again = km.lloyd_step(&frames).unwrap();
        prop_assert!(again.centroids.as_slice().iter().zip(km.centroids.as_slice()).all(|(a, b)| (a - b).abs() < 1e-9));
    }
}

#[test]
fn synthetic_corpus_is_byte_deterministic_and_labeled() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec { num_utterances: 6, seed: 11, ..SyntheticSpec::default() };
    let a = synthesize_corpus(&spec, dir.path().join("a")).unwrap();
    let b = synthesize_corpus(&spec, dir.path().join("b")).unwrap();
    let ma = nast_core::featureio::load_manifest(&a, true).unwrap();
    let mb = nast_core::featureio::load_manifest(&b, true).unwrap();
    for (ra, rb) in ma.records.iter().zip(&mb.records) {
        let fa = std::fs::read(ma.feature_path(ra)).unwrap();
        let fb = std::fs::read(mb.feature_path(rb)).unwrap();
        assert_eq!(fa, fb);
        assert_eq!(ra.phoneme_labels.as_ref().unwrap().len(), ra.num_frames);
        assert_eq!(ra.phoneme_labels, rb.phoneme_labels);
    }
}

#[test]
fn robustness_targets_carry_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let aug: Vec<f64> = (0..3 * 4).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
    let aug = Matrix::from_vec(3, 4, aug).unwrap();
    let grad_for = |model_seed: u64| {
        let model = NastModel::new(NastConfig { seed: model_seed, ..tiny_config(5, 4) }).unwrap();
        let clean = Matrix::filled(3, 5, 0.25);
        let params = model.params().clone();
        let mut t = Tape::new(&params);
        let x = t.constant(clean);
        let logits = model.predictor_on_tape(&mut t, x);
        let targets = t.value(logits).argmax_rows();
        let a = t.leaf(aug.clone());
        let loss = robustness_on_tape(&mut t, &targets, a, Reduction::Sum);
        let g = t.backward(loss);
        (targets, g.wrt(a).unwrap().clone(), g.into_params().iter().flatten().count())
    };
    let (ta, ga, na) = grad_for(1);
    assert_eq!(na, 0, "the clean path must receive no gradient from the robustness term");
    for seed in 2..20 {
        let (tb, gb, _) = grad_for(seed);
        if tb == ta {
            assert_eq!(ga, gb);
            return;
        }
    }
    panic!("no second parameter draw produced the same targets");
}

#[test]
fn shuffled_speaker_labels_stay_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let reps: Vec<Vec<f64>> = (0..200)
        .map(|_| (0..6).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect())
        .collect();
    let speakers: Vec<String> = (0..200).map(|i| format!("s{}", i % 2)).collect();
    let r = speaker_probe(Representation::Local, &reps, &speakers, 1, &ProbeConfig::default()).unwrap();
    // 40 held-out items at chance 0.5: three standard deviations is about 0.24.
    assert!(r.accuracy < 0.5 + 3.0 * (0.25f64 / r.test_size as f64).sqrt(), "{}", r.accuracy);
}
