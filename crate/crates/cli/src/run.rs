//! Command implementations.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Map, Value};

use nast_core::augment::{
    apply_to_features, apply_to_waveform, read_wav, write_wav, AugmentKind, AugmentSpec, NoiseBank, ParamRange,
    WavEncoding, DEFAULT_PITCH_SEMITONES,
};
use nast_core::config::{preset_desk, seed_from_toml_file, RunConfig};
use nast_core::eval::{
    augmentation_for, local_representation, noise_sweep, phoneme_purity, speaker_probe, ued_corpus,
    ued_from_unit_files, unit_usage_stats, ProbeConfig, Representation, SweepKind,
};
use nast_core::featureio::{load_manifest, read_header, synthesize_corpus, write_features, write_manifest, Manifest};
use nast_core::par::Mode;
use nast_core::tokenize::{kmeans_fit, read_units, stack_frames, tokenize_corpus, tokenize_manifest};
use nast_core::train::{load_checkpoint, train_loop, TrainConfig};
use nast_core::{KMeansModel, NastConfig, NastError, NastModel, Quantizer};

use crate::{AugmentArg, Cli, Command, Preset, ProbeArg, QuantizerArgs, SweepArg};

/// A failed command: category for the error line, and whether it was a
/// usage problem (exit 2) rather than a runtime failure (exit 1).
#[derive(Debug)]
pub struct CliError {
    pub category: &'static str,
    pub message: String,
    pub usage: bool,
}

impl CliError {
    pub fn category(&self) -> &'static str {
        self.category
    }

    fn usage(message: impl Into<String>) -> Self {
        CliError {
            category: "usage",
            message: message.into(),
            usage: true,
        }
    }
}

impl From<NastError> for CliError {
    fn from(e: NastError) -> Self {
        CliError {
            category: e.category(),
            message: e.to_string(),
            usage: false,
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        NastError::from(e).into()
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    NastError::io(path, e).into()
}

/// The record written next to every command's outputs.
#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    config: Map<String, Value>,
    seed: u64,
    artifacts: Vec<PathBuf>,
    toolkit_version: &'static str,
    duration_secs: f64,
}

struct Recorder {
    command: &'static str,
    started: Instant,
}

impl Recorder {
    /// Writes the run manifest to `path`, or to stderr as one line when the
    /// command has no output location.
    fn finish(self, path: Option<&Path>, config: Map<String, Value>, seed: u64, artifacts: Vec<PathBuf>) -> CliResult<()> {
        let m = RunManifest {
            command: self.command.to_string(),
            config,
            seed,
            artifacts,
            toolkit_version: env!("CARGO_PKG_VERSION"),
            duration_secs: self.started.elapsed().as_secs_f64(),
        };
        match path {
            Some(p) => fs::write(p, serde_json::to_string_pretty(&m)? + "\n").map_err(|e| io_err(p, e)),
            None => {
                eprintln!("run-manifest: {}", serde_json::to_string(&m)?);
                Ok(())
            }
        }
    }
}

/// `<file>.run.json` beside a file output.
fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}

fn object(v: impl Serialize) -> CliResult<Map<String, Value>> {
    match serde_json::to_value(v)? {
        Value::Object(m) => Ok(m),
        other => Ok(Map::from_iter([("value".to_string(), other)])),
    }
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_json(path: &Path, v: &impl Serialize) -> CliResult<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").map_err(|e| io_err(path, e))
}

/// The seed a command runs with: flag, then config file, then `default`.
fn resolve_seed(cli: &Cli, default: u64) -> CliResult<u64> {
    if let Some(s) = cli.seed {
        return Ok(s);
    }
    Ok(match &cli.config {
        Some(p) => seed_from_toml_file(p)?.unwrap_or(default),
        None => default,
    })
}

fn load_quantizer(q: &QuantizerArgs) -> CliResult<(Box<dyn Quantizer>, Option<NastModel>, Value)> {
    match (&q.checkpoint, &q.kmeans) {
        (Some(c), None) => {
            let model = load_checkpoint(c)?.model;
            let desc = json!({ "checkpoint": c });
            Ok((Box::new(model.clone()), Some(model), desc))
        }
        (None, Some(k)) => Ok((Box::new(KMeansModel::load(k)?), None, json!({ "kmeans": k }))),
        _ => Err(CliError::usage("give exactly one of --checkpoint or --kmeans")),
    }
}

fn augment_spec(kind: AugmentArg, lo: Option<f64>, hi: Option<f64>, rir: Option<&Path>) -> CliResult<AugmentSpec> {
    let range = |dlo: f64, dhi: f64| -> CliResult<ParamRange> {
        let l = lo.unwrap_or(dlo);
        let h = hi.unwrap_or(if lo.is_some() { l } else { dhi });
        Ok(ParamRange::new(l, h)?)
    };
    let k = match kind {
        AugmentArg::Identity => AugmentKind::Identity,
        AugmentArg::FeatureNoise => AugmentKind::FeatureNoise { scale: range(0.3, 0.3)? },
        AugmentArg::FeatureWarp => AugmentKind::FeatureWarp { rate: range(0.9, 1.1)? },
        AugmentArg::TimeStretch => AugmentKind::TimeStretch { rate: range(0.9, 1.1)? },
        AugmentArg::PitchShift => AugmentKind::PitchShift {
            semitones: lo.unwrap_or(DEFAULT_PITCH_SEMITONES),
        },
        AugmentArg::Noise => AugmentKind::Noise { snr_db: range(5.0, 15.0)? },
        AugmentArg::Reverb => AugmentKind::Reverb {
            rir_path: rir
                .ok_or_else(|| CliError::usage("reverb needs --rir"))?
                .to_path_buf(),
        },
    };
    Ok(AugmentSpec::new(k, 0)?)
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Synth {
            preset: Preset::Desk,
            out,
            num_utterances,
            noise_scale,
        } => {
            let rec = Recorder {
                command: "synth",
                started: Instant::now(),
            };
            let (mut spec, _, _) = preset_desk();
            spec.seed = resolve_seed(cli, spec.seed)?;
            if let Some(n) = num_utterances {
                spec.num_utterances = *n;
            }
            if let Some(s) = noise_scale {
                spec.noise_scale = *s;
            }
            let manifest = synthesize_corpus(&spec, out)?;
            println!("{}", manifest.display());
            rec.finish(Some(&out.join("run_manifest.json")), object(&spec)?, spec.seed, vec![manifest])
        }

        Command::Augment {
            kind,
            lo,
            hi,
            manifest,
            out,
            wav,
            noise_dir,
            rir,
        } => {
            let rec = Recorder {
                command: "augment",
                started: Instant::now(),
            };
            let spec = augment_spec(*kind, *lo, *hi, rir.as_deref())?;
            let seed = resolve_seed(cli, 0)?;
            let config = object(&spec)?;
            if let Some(wav) = wav {
                let w = read_wav(wav)?;
                let bank = match noise_dir {
                    Some(d) => NoiseBank::from_dir(d)?,
                    None => NoiseBank::default(),
                };
                let y = apply_to_waveform(&augmentation_for(&spec, seed, 0)?, &w, &bank)?;
                write_wav(&y, out, WavEncoding::Float32)?;
                return rec.finish(Some(&sidecar(out)), config, seed, vec![out.clone()]);
            }
            let manifest_path = manifest.as_ref().expect("clap requires --manifest without --wav");
            let m = load_manifest(manifest_path, true)?;
            ensure_dir(&out.join("features"))?;
            let mut records = Vec::with_capacity(m.len());
            for (i, r) in m.records.iter().enumerate() {
                let seq = m.load_features(r)?;
                let aug = apply_to_features(&augmentation_for(&spec, seed, i)?, &seq)?;
                let rel = PathBuf::from("features").join(format!("{}.nfeat", r.utterance_id));
                write_features(&aug, out.join(&rel))?;
                let mut rec = r.clone();
                rec.feature_path = rel;
                rec.num_frames = aug.num_frames();
                if rec.num_frames != seq.num_frames() {
                    rec.phoneme_labels = None;
                    rec.phoneme_path = None;
                } else if let Some(p) = &r.phoneme_path {
                    rec.phoneme_path = Some(m.root.join(p).canonicalize().map_err(|e| io_err(p, e))?);
                }
                records.push(rec);
            }
            let out_manifest = out.join("manifest.jsonl");
            write_manifest(&out_manifest, &records)?;
            rec.finish(Some(&out.join("run_manifest.json")), config, seed, vec![out_manifest])
        }

        Command::Train {
            manifest,
            out,
            preset,
            resume,
            steps,
            units,
            learning_rate,
            lambda1,
            lambda2,
            sequential,
        } => {
            let rec = Recorder {
                command: "train",
                started: Instant::now(),
            };
            let m = load_manifest(manifest, true)?;
            let base = match preset {
                Some(Preset::Desk) => {
                    let (_, model, train) = preset_desk();
                    RunConfig { model, train }
                }
                None => {
                    let first = m
                        .records
                        .first()
                        .ok_or_else(|| NastError::Empty("training corpus".into()))?;
                    let dim = read_header(m.feature_path(first))?.dim as usize;
                    RunConfig {
                        model: NastConfig::new(dim, 8),
                        train: TrainConfig::default(),
                    }
                }
            };
            let mut cfg = match &cli.config {
                Some(p) => base.with_toml_file(p)?,
                None => base,
            };
            let mut flags = Map::new();
            if let Some(s) = cli.seed {
                flags.insert("seed".into(), json!(s));
            }
            if let Some(s) = steps {
                flags.insert("max_steps".into(), json!(s));
            }
            if let Some(k) = units {
                flags.insert("num_units".into(), json!(k));
            }
            if let Some(v) = learning_rate {
                flags.insert("learning_rate".into(), json!(v));
            }
            if let Some(v) = lambda1 {
                flags.insert("lambda1".into(), json!(v));
            }
            if let Some(v) = lambda2 {
                flags.insert("lambda2".into(), json!(v));
            }
            cfg = cfg.with_overrides(&flags)?;
            let mode = if *sequential { Mode::Sequential } else { Mode::default() };
            let outcome = train_loop(&cfg.model, &cfg.train, &m, out, resume.as_deref(), mode)?;
            println!("{}", outcome.final_checkpoint.display());
            rec.finish(
                Some(&out.join("run_manifest.json")),
                cfg.flat()?,
                cfg.train.seed,
                vec![outcome.final_checkpoint, outcome.log_path],
            )
        }

        Command::Tokenize { quantizer, manifest, out } => {
            let rec = Recorder {
                command: "tokenize",
                started: Instant::now(),
            };
            let (q, _, desc) = load_quantizer(quantizer)?;
            let m = load_manifest(manifest, false)?;
            tokenize_corpus(q.as_ref(), &m, out)?;
            let config = object(json!({ "quantizer": desc, "manifest": manifest }))?;
            rec.finish(Some(&sidecar(out)), config, 0, vec![out.clone()])
        }

        Command::Kmeans {
            fit,
            assign: _,
            manifest,
            model,
            out,
            k,
            max_iters,
            tol,
        } => {
            let rec = Recorder {
                command: "kmeans",
                started: Instant::now(),
            };
            let seed = resolve_seed(cli, 0)?;
            let m = load_manifest(manifest, false)?;
            let config = object(json!({ "fit": fit, "k": k, "max_iters": max_iters, "tol": tol, "manifest": manifest }))?;
            if *fit {
                let frames = stack_frames(&m.load_all()?)?;
                let km = kmeans_fit(&frames, *k, seed, *max_iters, *tol)?;
                km.save(model)?;
                log::info!("k-means inertia {:?}", km.inertia_history.last());
                rec.finish(Some(&sidecar(model)), config, seed, vec![model.clone()])
            } else {
                let out = out.as_ref().ok_or_else(|| CliError::usage("--assign needs --out"))?;
                let km = KMeansModel::load(model)?;
                tokenize_corpus(&km, &m, out)?;
                rec.finish(Some(&sidecar(out)), config, seed, vec![out.clone()])
            }
        }

        Command::EvalUed {
            units_clean,
            units_aug,
            quantizer,
            manifest,
            kind,
            lo,
            hi,
            out,
        } => {
            let rec = Recorder {
                command: "eval-ued",
                started: Instant::now(),
            };
            let seed = resolve_seed(cli, 0)?;
            let (report, config) = match (units_clean, units_aug) {
                (Some(a), Some(b)) => (
                    ued_from_unit_files(&read_units(a)?, &read_units(b)?)?,
                    object(json!({ "units_clean": a, "units_aug": b }))?,
                ),
                _ => {
                    let manifest = manifest
                        .as_ref()
                        .ok_or_else(|| CliError::usage("give --units-clean/--units-aug, or a quantizer and --manifest"))?;
                    let (q, _, desc) = load_quantizer(quantizer)?;
                    let spec = augment_spec(*kind, *lo, *hi, None)?;
                    let m = load_manifest(manifest, false)?;
                    let report = ued_corpus(q.as_ref(), &m, &spec, seed)?;
                    (report, object(json!({ "quantizer": desc, "augmentation": spec, "manifest": manifest }))?)
                }
            };
            print!("{}", report.table());
            println!("mean UED: {:.4}", report.mean);
            if let Some(p) = out {
                write_json(p, &report)?;
            }
            rec.finish(out.as_deref().map(sidecar).as_deref(), config, seed, out.iter().cloned().collect())
        }

        Command::Probe {
            quantizer,
            manifest,
            representation,
            out,
        } => {
            let rec = Recorder {
                command: "probe",
                started: Instant::now(),
            };
            let seed = resolve_seed(cli, 0)?;
            let (q, model, desc) = load_quantizer(quantizer)?;
            let m = load_manifest(manifest, false)?;
            let speakers: Vec<String> = m.records.iter().map(|r| r.speaker_id.clone()).collect();
            let cfg = ProbeConfig::default();
            let mut reports = Vec::new();
            if matches!(representation, ProbeArg::Local | ProbeArg::Both) {
                let k = q.num_units();
                let units = tokenize_manifest(q.as_ref(), &m, Mode::default())?;
                let reps: Vec<Vec<f64>> = units.iter().map(|z| local_representation(z, k)).collect();
                reports.push(speaker_probe(Representation::Local, &reps, &speakers, seed, &cfg)?);
            }
            if matches!(representation, ProbeArg::Global | ProbeArg::Both) {
                let model = model.ok_or_else(|| CliError::usage("the global probe needs --checkpoint"))?;
                let reps = m
                    .records
                    .iter()
                    .map(|r| Ok(model.encode_global(&m.load_features(r)?)?.u))
                    .collect::<CliResult<Vec<_>>>()?;
                reports.push(speaker_probe(Representation::Global, &reps, &speakers, seed, &cfg)?);
            }
            for r in &reports {
                println!(
                    "{:<8} accuracy {:.4}  speakers {}  train {}  test {}",
                    format!("{:?}", r.representation).to_lowercase(),
                    r.accuracy,
                    r.num_speakers,
                    r.train_size,
                    r.test_size
                );
            }
            if let Some(p) = out {
                write_json(p, &reports)?;
            }
            let config = object(json!({ "quantizer": desc, "manifest": manifest }))?;
            rec.finish(out.as_deref().map(sidecar).as_deref(), config, seed, out.iter().cloned().collect())
        }

        Command::Sweep {
            quantizer,
            manifest,
            kind,
            levels,
            out,
        } => {
            let rec = Recorder {
                command: "sweep",
                started: Instant::now(),
            };
            let seed = resolve_seed(cli, 0)?;
            let (q, _, desc) = load_quantizer(quantizer)?;
            let m = load_manifest(manifest, false)?;
            let kind = match kind {
                SweepArg::FeatureNoise => SweepKind::FeatureNoise,
                SweepArg::FeatureWarp => SweepKind::FeatureWarp,
            };
            let curve = noise_sweep(q.as_ref(), &m, kind, levels, seed)?;
            fs::write(out, curve.to_csv()).map_err(|e| io_err(out, e))?;
            println!("{}", serde_json::to_string_pretty(&curve)?);
            let config = object(json!({ "quantizer": desc, "manifest": manifest, "kind": kind, "levels": levels }))?;
            rec.finish(Some(&sidecar(out)), config, seed, vec![out.clone()])
        }

        Command::Stats { units, k, manifest, out } => {
            let rec = Recorder {
                command: "stats",
                started: Instant::now(),
            };
            let seqs = read_units(units)?;
            let usage = unit_usage_stats(&seqs, *k)?;
            println!("normalized entropy {:.4}", usage.normalized_entropy);
            let mut report = json!({ "usage": usage });
            if let Some(mp) = manifest {
                let m: Manifest = load_manifest(mp, true)?;
                let purity = phoneme_purity(&seqs, &m, *k)?;
                println!(
                    "nmi {:.4}  best-map frame accuracy {:.4}",
                    purity.nmi, purity.frame_accuracy_best_map
                );
                report["purity"] = serde_json::to_value(&purity)?;
            }
            if let Some(p) = out {
                write_json(p, &report)?;
            }
            let config = object(json!({ "units": units, "k": k, "manifest": manifest }))?;
            rec.finish(out.as_deref().map(sidecar).as_deref(), config, 0, out.iter().cloned().collect())
        }
    }
}
