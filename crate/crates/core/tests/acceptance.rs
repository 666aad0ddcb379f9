//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs without the libtest harness so the report is always printed. The
//! process exits non-zero when any criterion fails.

mod common;

use std::path::Path;
use std::time::Instant;

use common::{measured_snr_db, peak_frequency, tiny_config};
use nast_core::augment::{inject_noise, pitch_shift, synthesis_hop, time_stretch, AugmentSpec, Waveform};
use nast_core::autodiff::{Params, Reduction, Tape};
use nast_core::config::preset_desk;
use nast_core::eval::{
    levenshtein, local_representation, nmi, noise_sweep, phoneme_purity, spearman, speaker_probe,
    ued_corpus, unit_edit_distance, unit_usage_stats, ProbeConfig, Representation, SweepKind,
};
use nast_core::featureio::{load_manifest, synthesize_corpus, Manifest};
use nast_core::losses::{
    diversity_loss, diversity_on_tape, reconstruction_loss, reconstruction_on_tape, robustness_loss,
    robustness_on_tape,
};
use nast_core::model::{gumbel_noise, OneHotSequence};
use nast_core::par::Mode;
use nast_core::tokenize::{kmeans_assign, kmeans_fit, stack_frames, tokenize_corpus, tokenize_manifest};
use nast_core::train::{load_checkpoint, objective_on_tape, save_checkpoint, train_loop, TrainConfig, TrainOutcome};
use nast_core::{FeatureSequence, Matrix, NastConfig, NastModel, UnitSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn loss_arithmetic() -> Outcome {
    let mut worst: f64 = 0.0;
    for k in [2usize, 4, 8, 16] {
        let uniform = OneHotSequence {
            vectors: Matrix::filled(5, k, 1.0 / k as f64),
            hard: false,
        };
        worst = worst.max((diversity_loss(&uniform) - (-(k as f64).ln() / k as f64)).abs());
        let one_hot = OneHotSequence::from_units(&[1, 1, 1], k as u32 as usize);
        worst = worst.max(diversity_loss(&one_hot).abs());
    }
    let div_ok = worst <= 1e-9;

    let mut robust_err: f64 = 0.0;
    for (t, k) in [(1usize, 2usize), (3, 4), (10, 8), (7, 5)] {
        let units: Vec<u32> = (0..t as u32).map(|i| i % k as u32).collect();
        let clean = OneHotSequence::from_units(&units, k);
        let flat = Matrix::filled(t, k, 0.37);
        let v = robustness_loss(&clean, &flat).unwrap();
        robust_err = robust_err.max((v - t as f64 * (k as f64).ln()).abs());
    }
    let robust_ok = robust_err <= 1e-6;

    // Hand-computed mean absolute differences.
    let cases: [(&[f64], &[f32], usize, usize, f64); 3] = [
        (&[1.0, 2.0, 3.0, 4.0], &[0.0, 2.0, 5.0, 4.0], 2, 2, 0.75),
        (&[0.5, -0.5, 1.5], &[0.25, 0.25, 0.25], 3, 1, (0.25 + 0.75 + 1.25) / 3.0),
        (&[-1.0, -2.0, 0.0, 0.0, 2.0, 1.0], &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0], 2, 3, 9.0 / 6.0),
    ];
    let mut recon_err: f64 = 0.0;
    for (decoded, target, t, d, want) in cases {
        let dm = Matrix::from_vec(t, d, decoded.to_vec()).unwrap();
        let target = FeatureSequence::new("r", t, d, target.to_vec()).unwrap();
        recon_err = recon_err.max((reconstruction_loss(&dm, &target).unwrap() - want).abs());
    }
    let recon_ok = recon_err <= 1e-9;
    outcome(
        div_ok && robust_ok && recon_ok,
        format!("diversity err {worst:.1e}, robustness err {robust_err:.1e}, reconstruction err {recon_err:.1e}"),
    )
}

/// Relative error with an absolute floor, so entries whose true gradient is
/// zero are judged by absolute difference.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

fn gradient_checks() -> Outcome {
    let (k, t, d) = (4usize, 3usize, 5usize);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let h = 1e-6;
    let empty = Params::new();

    // Each loss with respect to its continuous input.
    let check_input = |x0: &Matrix, f: &dyn Fn(&mut Tape, nast_core::autodiff::Var) -> nast_core::autodiff::Var| {
        let value = |x: &Matrix| {
            let mut tape = Tape::new(&empty);
            let v = tape.constant(x.clone());
            let out = f(&mut tape, v);
            tape.scalar(out)
        };
        let mut tape = Tape::new(&empty);
        let v = tape.leaf(x0.clone());
        let out = f(&mut tape, v);
        let g = tape.backward(out).wrt(v).unwrap().clone();
        let mut worst: f64 = 0.0;
        for i in 0..x0.len() {
            let mut p = x0.clone();
            p.as_mut_slice()[i] += h;
            let mut m = x0.clone();
            m.as_mut_slice()[i] -= h;
            worst = worst.max(rel_err(g.as_slice()[i], (value(&p) - value(&m)) / (2.0 * h)));
        }
        worst
    };

    let decoded = random_matrix(t, d, &mut rng);
    let target = random_matrix(t, d, &mut rng);
    let recon = check_input(&decoded, &|tape, v| reconstruction_on_tape(tape, v, target.clone()));

    let aug = random_matrix(t + 1, k, &mut rng);
    let targets = vec![0usize, 3, 1];
    let robust = check_input(&aug, &|tape, v| robustness_on_tape(tape, &targets, v, Reduction::Sum));

    let logits = random_matrix(t, k, &mut rng);
    let diversity = check_input(&logits, &|tape, v| {
        let p = tape.softmax_rows(v);
        diversity_on_tape(tape, p)
    });

    // Composite objective with respect to every model parameter.
    let model = NastModel::new(NastConfig {
        lambda1: 1.0,
        lambda2: 0.5,
        seed: 11,
        ..tiny_config(d, k)
    })
    .unwrap();
    let clean = random_matrix(t, d, &mut rng);
    let augmented = random_matrix(t + 1, d, &mut rng);
    let noise = gumbel_noise(t, k, &mut rng);
    let tau = 0.9;
    let total_at = |params: &Params| {
        let m = NastModel::from_params(model.config().clone(), params.clone()).unwrap();
        let mut tape = Tape::new(m.params());
        let o = objective_on_tape(&mut tape, &m, &clean, &augmented, noise.clone(), tau);
        tape.scalar(o.total)
    };
    let grads = {
        let mut tape = Tape::new(model.params());
        let o = objective_on_tape(&mut tape, &model, &clean, &augmented, noise.clone(), tau);
        tape.backward(o.total).into_params()
    };
    let mut composite: f64 = 0.0;
    let mut checked = 0;
    for (id, g) in grads.iter().enumerate() {
        let len = model.params().get(id).len();
        for i in 0..len {
            let mut p = model.params().clone();
            p.get_mut(id).as_mut_slice()[i] += h;
            let mut m = model.params().clone();
            m.get_mut(id).as_mut_slice()[i] -= h;
            let numeric = (total_at(&p) - total_at(&m)) / (2.0 * h);
            let analytic = g.as_ref().map_or(0.0, |g| g.as_slice()[i]);
            composite = composite.max(rel_err(analytic, numeric));
            checked += 1;
        }
    }
    let worst = recon.max(robust).max(diversity).max(composite);
    outcome(
        worst < 1e-4,
        format!(
            "max rel err: reconstruction {recon:.1e}, robustness {robust:.1e}, diversity {diversity:.1e}, composite {composite:.1e} over {checked} parameters"
        ),
    )
}

fn gumbel_max_fidelity() -> Outcome {
    let n = 100_000;
    let logits = [1f64.ln(), 2f64.ln(), 3f64.ln()];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut counts = [0usize; 3];
    for _ in 0..n {
        let noise = gumbel_noise(1, 3, &mut rng);
        let perturbed = Matrix::from_vec(1, 3, logits.iter().zip(noise.as_slice()).map(|(l, g)| l + g).collect())
            .unwrap();
        counts[perturbed.argmax_rows()[0]] += 1;
    }
    let mut worst_sigma: f64 = 0.0;
    for (i, &c) in counts.iter().enumerate() {
        let p = (i + 1) as f64 / 6.0;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        worst_sigma = worst_sigma.max((c as f64 / n as f64 - p).abs() / sigma);
    }
    outcome(worst_sigma <= 3.0, format!("counts {counts:?}, worst deviation {worst_sigma:.2} sigma"))
}

/// Every sequence of length 0..=8 over {0, 1, 2}, indexed so that the first
/// symbol is the most significant digit within its length block.
fn all_sequences() -> (Vec<Vec<u32>>, Vec<usize>) {
    let mut seqs = Vec::new();
    let mut offsets = Vec::new();
    for len in 0..=8u32 {
        offsets.push(seqs.len());
        for code in 0..3usize.pow(len) {
            let mut s = vec![0u32; len as usize];
            let mut c = code;
            for slot in s.iter_mut().rev() {
                *slot = (c % 3) as u32;
                c /= 3;
            }
            seqs.push(s);
        }
    }
    (seqs, offsets)
}

fn edit_distance_oracle() -> Outcome {
    let (seqs, offsets) = all_sequences();
    let n = seqs.len();
    // Suffix of sequence i: same digits without the leading one.
    let suffix = |i: usize| -> usize {
        let len = seqs[i].len();
        let code = i - offsets[len];
        offsets[len - 1] + code % 3usize.pow(len as u32 - 1)
    };
    let mut table = vec![0u8; n * n];
    let order: Vec<usize> = (0..n).collect();
    for &i in &order {
        for &j in &order {
            let (a, b) = (&seqs[i], &seqs[j]);
            let v = if a.is_empty() {
                b.len() as u8
            } else if b.is_empty() {
                a.len() as u8
            } else {
                let (si, sj) = (suffix(i), suffix(j));
                let sub = table[si * n + sj] + u8::from(a[0] != b[0]);
                sub.min(table[si * n + j] + 1).min(table[i * n + sj] + 1)
            };
            table[i * n + j] = v;
        }
    }
    let mut mismatches = 0usize;
    for i in 0..n {
        for j in 0..n {
            if levenshtein(&seqs[i], &seqs[j]) != table[i * n + j] as usize {
                mismatches += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut self_nonzero = 0;
    for _ in 0..1000 {
        let len = rng.random_range(0..80);
        let z = UnitSequence::new("z", (0..len).map(|_| rng.random_range(0..8)).collect());
        if unit_edit_distance(&z, &z) != 0.0 {
            self_nonzero += 1;
        }
    }
    outcome(
        mismatches == 0 && self_nonzero == 0,
        format!("{} pairs, {mismatches} mismatches; UED(z,z) nonzero for {self_nonzero}/1000", n * n),
    )
}

fn dsp_calibration() -> Outcome {
    let sr = 16_000;
    let speech = Waveform::sine(220.0, 0.3, sr, 16_000);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let noise = Waveform::new((0..5000).map(|_| rng.random_range(-0.5..0.5)).collect(), sr).unwrap();
    let mut snr_err: f64 = 0.0;
    for snr in [0.0, 5.0, 10.0, 15.0] {
        let mixed = inject_noise(&speech, &noise, snr).unwrap();
        snr_err = snr_err.max((measured_snr_db(&speech, &mixed) - snr).abs());
    }

    let tone = Waveform::sine(440.0, 0.5, sr, 16_000);
    let mut stretch_ok = true;
    let mut stretch_detail = Vec::new();
    for rate in [0.8, 1.0, 1.2] {
        let out = time_stretch(&tone, rate).unwrap();
        let off = (out.len() as f64 - tone.len() as f64 / rate).abs();
        stretch_ok &= off <= synthesis_hop(rate) as f64;
        stretch_detail.push(format!("r={rate}: off by {off}"));
    }

    let shifted = pitch_shift(&tone, 4.0).unwrap();
    let (f, bin) = peak_frequency(&shifted);
    let target = 440.0 * 2f64.powf(4.0 / 12.0);
    let pitch_ok = (f - target).abs() <= bin;
    outcome(
        snr_err <= 0.1 && stretch_ok && pitch_ok,
        format!(
            "SNR err {snr_err:.2e} dB; {}; +4 st peak {f:.1} Hz vs {target:.1} Hz (bin {bin:.1} Hz)",
            stretch_detail.join(", ")
        ),
    )
}

struct DeskRun {
    manifest: Manifest,
    nast: TrainOutcome,
    model: NastModel,
}

fn desk_corpus(dir: &Path) -> Manifest {
    let (spec, _, _) = preset_desk();
    load_manifest(synthesize_corpus(&spec, dir.join("corpus")).unwrap(), true).unwrap()
}

fn train_preset(m: &Manifest, out: &Path, edit: impl Fn(&mut NastConfig, &mut TrainConfig)) -> TrainOutcome {
    let (_, mut model, mut train) = preset_desk();
    edit(&mut model, &mut train);
    train_loop(&model, &train, m, out, None, Mode::default()).unwrap()
}

fn desk_end_to_end(dir: &Path) -> (Outcome, DeskRun) {
    let started = Instant::now();
    let manifest = desk_corpus(dir);
    let nast = train_preset(&manifest, &dir.join("nast"), |_, _| {});
    let ablation = train_preset(&manifest, &dir.join("ablation"), |m, _| m.lambda2 = 0.0);
    let minutes = started.elapsed().as_secs_f64() / 60.0;
    let model = load_checkpoint(&nast.final_checkpoint).unwrap().model;
    let ablated = load_checkpoint(&ablation.final_checkpoint).unwrap().model;
    let (_, cfg, _) = preset_desk();
    let k = cfg.num_units;

    let units = tokenize_manifest(&model, &manifest, Mode::default()).unwrap();
    let purity = phoneme_purity(&units, &manifest, k).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let labels: Vec<usize> = manifest
        .records
        .iter()
        .flat_map(|r| r.phoneme_labels.clone().unwrap())
        .map(|p| p as usize)
        .collect();
    let random: Vec<usize> = labels.iter().map(|_| rng.random_range(0..k)).collect();
    let random_nmi = nmi(&random, &labels).unwrap();
    let a = purity.nmi >= 0.6 && random_nmi < 0.05;

    let usage = unit_usage_stats(&units, k).unwrap();
    let b = usage.normalized_entropy >= 0.8;

    let noise = AugmentSpec::feature_noise(0.3, 0.3).unwrap();
    let ued_nast = ued_corpus(&model, &manifest, &noise, 7).unwrap().mean;
    let ued_ablation = ued_corpus(&ablated, &manifest, &noise, 7).unwrap().mean;
    let c = ued_nast < ued_ablation;

    let speakers: Vec<String> = manifest.records.iter().map(|r| r.speaker_id.clone()).collect();
    let local: Vec<Vec<f64>> = units.iter().map(|z| local_representation(z, k)).collect();
    let global: Vec<Vec<f64>> = manifest
        .records
        .iter()
        .map(|r| model.encode_global(&manifest.load_features(r).unwrap()).unwrap().u)
        .collect();
    let probe = ProbeConfig::default();
    let local_acc = speaker_probe(Representation::Local, &local, &speakers, 7, &probe).unwrap().accuracy;
    let global_acc = speaker_probe(Representation::Global, &global, &speakers, 7, &probe).unwrap().accuracy;
    let d = global_acc > local_acc;

    let pass = a && b && c && d && minutes < 10.0;
    let detail = format!(
        "(a) NMI {:.3} vs random {random_nmi:.4} (b) entropy {:.3} (c) UED {ued_nast:.2} vs ablation {ued_ablation:.2} (d) probe global {global_acc:.3} vs local {local_acc:.3}; both trainings {minutes:.1} min",
        purity.nmi, usage.normalized_entropy
    );
    (outcome(pass, detail), DeskRun { manifest, nast, model })
}

fn kmeans_parity(m: &Manifest) -> Outcome {
    let seqs = m.load_all().unwrap();
    let frames = stack_frames(&seqs).unwrap();
    let km = kmeans_fit(&frames, 8, 7, 100, 1e-6).unwrap();
    let h = &km.inertia_history;
    let monotone = h.windows(2).all(|w| w[1] <= w[0]);

    let mut mismatched = 0usize;
    for seq in &seqs {
        let got = kmeans_assign(&km, seq).unwrap();
        for (t, &u) in got.units.iter().enumerate() {
            let frame: Vec<f64> = seq.frame(t).iter().map(|&v| v as f64).collect();
            let mut best = (f64::INFINITY, 0usize);
            for c in 0..8 {
                let dist: f64 = km.centroids.row(c).iter().zip(&frame).map(|(a, b)| (a - b).powi(2)).sum();
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            mismatched += usize::from(best.1 as u32 != u);
        }
    }

    let levels = [0.0, 0.1, 0.2, 0.4, 0.8, 1.6];
    let curve = noise_sweep(&km, m, SweepKind::FeatureNoise, &levels, 7).unwrap();
    let values = curve.values();
    let rho = spearman(&levels, &values).unwrap_or(f64::NAN);
    let non_decreasing = values.windows(2).all(|w| w[1] >= w[0]);
    outcome(
        monotone && mismatched == 0 && rho > 0.9,
        format!(
            "{} Lloyd records, monotone {monotone}; {mismatched} assignment mismatches; sweep {:?} (non-decreasing {non_decreasing}), Spearman {rho:.3}",
            h.len(),
            values.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>()
        ),
    )
}

fn determinism(dir: &Path, desk: &DeskRun) -> Outcome {
    let m = &desk.manifest;
    let short = |name: &str| train_preset(m, &dir.join(name), |_, t| t.max_steps = 200);
    let (a, b) = (short("repeat_a"), short("repeat_b"));
    let logs_equal = std::fs::read(&a.log_path).unwrap() == std::fs::read(&b.log_path).unwrap();
    let ma = load_checkpoint(&a.final_checkpoint).unwrap().model;
    let mb = load_checkpoint(&b.final_checkpoint).unwrap().model;
    let (ua, ub) = (dir.join("a.units"), dir.join("b.units"));
    tokenize_corpus(&ma, m, &ua).unwrap();
    tokenize_corpus(&mb, m, &ub).unwrap();
    let units_equal = std::fs::read(&ua).unwrap() == std::fs::read(&ub).unwrap();

    let state = load_checkpoint(&desk.nast.final_checkpoint).unwrap();
    let copy = dir.join("resaved.nast");
    save_checkpoint(&state, None, &copy).unwrap();
    let reloaded = load_checkpoint(&copy).unwrap().model;
    let mut bit_exact = true;
    for r in &m.records {
        let seq = m.load_features(r).unwrap();
        let x = desk.model.predict_logits(&seq).unwrap().logits;
        let y = reloaded.predict_logits(&seq).unwrap().logits;
        bit_exact &= x.as_slice().iter().zip(y.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits());
        bit_exact &= desk.model.quantize(&seq).unwrap() == reloaded.quantize(&seq).unwrap();
    }
    outcome(
        logs_equal && units_equal && bit_exact,
        format!("loss logs identical {logs_equal}; unit files identical {units_equal}; reloaded quantize bit-exact {bit_exact}"),
    )
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let mut results: Vec<(u32, &str, Outcome, f64)> = Vec::new();
    let mut run = |id: u32, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        println!(
            "criterion {id} {name}: {} [{secs:.1}s] {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((id, name, o, secs));
    };
    run(1, "loss arithmetic", &mut loss_arithmetic);
    run(2, "gradient checks", &mut gradient_checks);
    run(3, "gumbel-max fidelity", &mut gumbel_max_fidelity);
    run(4, "edit-distance oracle", &mut edit_distance_oracle);
    run(5, "dsp calibration", &mut dsp_calibration);
    let mut desk = None;
    run(6, "desk-scale end-to-end", &mut || {
        let (o, d) = desk_end_to_end(dir.path());
        desk = Some(d);
        o
    });
    let desk = desk.unwrap();
    run(7, "baseline parity", &mut || kmeans_parity(&desk.manifest));
    run(8, "determinism and persistence", &mut || determinism(dir.path(), &desk));

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
