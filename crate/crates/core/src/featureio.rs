//! Framed speech features on disk, corpus manifests, and the labeled
//! synthetic corpus generator.
//!
//! Feature file layout (all integers little-endian):
//!
//! | bytes  | content                                   |
//! |--------|-------------------------------------------|
//! | 0..8   | magic `NASTFEAT`                          |
//! | 8..12  | version `u32` (1 = `f32` payload)         |
//! | 12..16 | frame count `T` as `u32`                  |
//! | 16..20 | feature dimension `d` as `u32`            |
//! | 20..   | `T * d` IEEE-754 values, frame-major      |
//!
//! Version 2 of the same layout carries `f64` values and is used for model
//! checkpoints, where parameters must round-trip without rounding.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{NastError, Result};
use crate::tensor::Matrix;

pub const FEATURE_MAGIC: &[u8; 8] = b"NASTFEAT";
pub const VERSION_F32: u32 = 1;
pub const VERSION_F64: u32 = 2;
pub const HEADER_LEN: usize = 20;
pub const DEFAULT_FRAME_RATE_HZ: f64 = 50.0;

/// A `T x d` matrix of frame features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub utterance_id: String,
    /// Carried as metadata only.
    pub frame_rate_hz: f64,
    num_frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(
        utterance_id: impl Into<String>,
        num_frames: usize,
        dim: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if num_frames == 0 || dim == 0 {
            return Err(NastError::InvalidParameter(format!(
                "feature sequence must be at least 1x1, got {num_frames}x{dim}"
            )));
        }
        if data.len() != num_frames * dim {
            return Err(NastError::dims(num_frames * dim, data.len(), "feature payload"));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(NastError::NonFinite {
                row: i / dim,
                col: i % dim,
            });
        }
        Ok(FeatureSequence {
            utterance_id: utterance_id.into(),
            frame_rate_hz: DEFAULT_FRAME_RATE_HZ,
            num_frames,
            dim,
            data,
        })
    }

    /// Converts an `f64` matrix, rounding every entry to `f32`.
    pub fn from_matrix(utterance_id: impl Into<String>, m: &Matrix) -> Result<Self> {
        let data = m.as_slice().iter().map(|&x| x as f32).collect();
        Self::new(utterance_id, m.rows(), m.cols(), data)
    }

    pub fn from_rows(utterance_id: impl Into<String>, rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(NastError::InvalidParameter("ragged feature rows".into()));
        }
        Self::new(utterance_id, rows.len(), dim, rows.concat())
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(
            self.num_frames,
            self.dim,
            self.data.iter().map(|&x| f64::from(x)).collect(),
        )
        .expect("shape checked at construction")
    }

    /// Root mean square over every entry.
    pub fn rms(&self) -> f64 {
        let ss: f64 = self.data.iter().map(|&x| f64::from(x).powi(2)).sum();
        (ss / self.data.len() as f64).sqrt()
    }
}

/// Header fields of a feature file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureHeader {
    pub version: u32,
    pub num_frames: u32,
    pub dim: u32,
}

fn encode_header(version: u32, rows: usize, cols: usize) -> Result<[u8; HEADER_LEN]> {
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| NastError::InvalidParameter(format!("{what} {v} exceeds u32")))
    };
    let mut h = [0u8; HEADER_LEN];
    h[..8].copy_from_slice(FEATURE_MAGIC);
    h[8..12].copy_from_slice(&version.to_le_bytes());
    h[12..16].copy_from_slice(&to_u32(rows, "frame count")?.to_le_bytes());
    h[16..20].copy_from_slice(&to_u32(cols, "dimension")?.to_le_bytes());
    Ok(h)
}

fn decode_header(path: &Path, bytes: &[u8]) -> Result<FeatureHeader> {
    if bytes.len() < 8 || &bytes[..8] != FEATURE_MAGIC {
        return Err(NastError::BadMagic {
            path: path.to_path_buf(),
            expected: "NASTFEAT",
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(NastError::Truncated {
            path: path.to_path_buf(),
            declared: HEADER_LEN as u64,
            available: bytes.len() as u64,
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    Ok(FeatureHeader {
        version: word(8),
        num_frames: word(12),
        dim: word(16),
    })
}

/// Serializes `seq` into the version-1 byte layout.
pub fn encode_features(seq: &FeatureSequence) -> Result<Vec<u8>> {
    if let Some(i) = seq.data.iter().position(|x| !x.is_finite()) {
        return Err(NastError::NonFinite {
            row: i / seq.dim,
            col: i % seq.dim,
        });
    }
    let mut out = Vec::with_capacity(HEADER_LEN + seq.data.len() * 4);
    out.extend_from_slice(&encode_header(VERSION_F32, seq.num_frames, seq.dim)?);
    for x in &seq.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn write_features(seq: &FeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_features(seq)?;
    fs::write(path, bytes).map_err(|e| NastError::io(path, e))
}

/// Parses a version-1 feature buffer; `path` is only used for error messages.
pub fn decode_features(path: &Path, bytes: &[u8]) -> Result<FeatureSequence> {
    let h = decode_header(path, bytes)?;
    if h.version != VERSION_F32 {
        return Err(NastError::VersionMismatch {
            path: path.to_path_buf(),
            found: h.version,
            expected: VERSION_F32,
        });
    }
    let (t, d) = (h.num_frames as usize, h.dim as usize);
    let declared = (t as u64) * (d as u64) * 4;
    let available = (bytes.len() - HEADER_LEN) as u64;
    if declared > available {
        return Err(NastError::Truncated {
            path: path.to_path_buf(),
            declared,
            available,
        });
    }
    let data = bytes[HEADER_LEN..HEADER_LEN + declared as usize]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    FeatureSequence::new(id, t, d, data)
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| NastError::io(path, e))?;
    decode_features(path, &bytes)
}

/// Reads only the 20-byte header.
pub fn read_header(path: impl AsRef<Path>) -> Result<FeatureHeader> {
    let path = path.as_ref();
    let mut f = File::open(path).map_err(|e| NastError::io(path, e))?;
    let mut buf = Vec::with_capacity(HEADER_LEN);
    Read::by_ref(&mut f)
        .take(HEADER_LEN as u64)
        .read_to_end(&mut buf)
        .map_err(|e| NastError::io(path, e))?;
    decode_header(path, &buf)
}

/// Appends a version-2 (`f64`) matrix record to `out`.
pub(crate) fn encode_matrix_f64(m: &Matrix, out: &mut Vec<u8>) -> Result<()> {
    out.extend_from_slice(&encode_header(VERSION_F64, m.rows(), m.cols())?);
    for x in m.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(())
}

/// Decodes a version-2 matrix record, returning it with the bytes consumed.
pub(crate) fn decode_matrix_f64(path: &Path, bytes: &[u8]) -> Result<(Matrix, usize)> {
    let h = decode_header(path, bytes)?;
    if h.version != VERSION_F64 {
        return Err(NastError::VersionMismatch {
            path: path.to_path_buf(),
            found: h.version,
            expected: VERSION_F64,
        });
    }
    let (r, c) = (h.num_frames as usize, h.dim as usize);
    let declared = (r * c * 8) as u64;
    let available = (bytes.len() - HEADER_LEN) as u64;
    if declared > available {
        return Err(NastError::Truncated {
            path: path.to_path_buf(),
            declared,
            available,
        });
    }
    let data = bytes[HEADER_LEN..HEADER_LEN + declared as usize]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((Matrix::from_vec(r, c, data)?, HEADER_LEN + declared as usize))
}

/// One utterance of a corpus manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceRecord {
    pub utterance_id: String,
    /// Relative to the manifest's directory.
    pub feature_path: PathBuf,
    pub speaker_id: String,
    pub phoneme_labels: Option<Vec<u32>>,
    pub num_frames: usize,
    /// Relative to the manifest's directory; kept so the manifest can be rewritten.
    pub phoneme_path: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    feature_path: String,
    speaker: String,
    num_frames: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    phoneme_path: Option<String>,
}

/// A loaded manifest: its records plus the directory paths resolve against.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<UtteranceRecord>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn feature_path(&self, rec: &UtteranceRecord) -> PathBuf {
        self.root.join(&rec.feature_path)
    }

    /// Reads the features of `rec`, tagging them with its utterance id.
    pub fn load_features(&self, rec: &UtteranceRecord) -> Result<FeatureSequence> {
        let mut seq = read_features(self.feature_path(rec))?;
        seq.utterance_id = rec.utterance_id.clone();
        Ok(seq)
    }

    pub fn load_all(&self) -> Result<Vec<FeatureSequence>> {
        self.records.iter().map(|r| self.load_features(r)).collect()
    }
}

fn parse_labels(path: &Path) -> Result<Vec<u32>> {
    let text = fs::read_to_string(path).map_err(|e| NastError::io(path, e))?;
    let line = text.lines().next().unwrap_or("");
    line.split_whitespace()
        .map(|tok| {
            tok.parse::<u32>().map_err(|_| NastError::Manifest {
                line: 1,
                message: format!("bad phoneme label {tok:?} in {}", path.display()),
            })
        })
        .collect()
}

/// Loads a JSON-lines manifest. With `validate`, every feature file must exist
/// and its header must agree with `num_frames`.
pub fn load_manifest(path: impl AsRef<Path>, validate: bool) -> Result<Manifest> {
    let path = path.as_ref();
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let file = File::open(path).map_err(|e| NastError::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| NastError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine = serde_json::from_str(&line).map_err(|e| NastError::Manifest {
            line: line_no,
            message: e.to_string(),
        })?;
        let phoneme_path = parsed.phoneme_path.map(PathBuf::from);
        let phoneme_labels = match &phoneme_path {
            Some(p) => Some(parse_labels(&root.join(p))?),
            None => None,
        };
        let rec = UtteranceRecord {
            utterance_id: parsed.id,
            feature_path: PathBuf::from(parsed.feature_path),
            speaker_id: parsed.speaker,
            phoneme_labels,
            num_frames: parsed.num_frames,
            phoneme_path,
        };
        if let Some(labels) = &rec.phoneme_labels {
            if labels.len() != rec.num_frames {
                return Err(NastError::Validation {
                    utterance: rec.utterance_id,
                    message: format!(
                        "{} phoneme labels for {} frames",
                        labels.len(),
                        rec.num_frames
                    ),
                });
            }
        }
        if validate {
            let fpath = root.join(&rec.feature_path);
            if !fpath.is_file() {
                return Err(NastError::Validation {
                    utterance: rec.utterance_id,
                    message: format!("dangling feature_path {}", fpath.display()),
                });
            }
            let h = read_header(&fpath)?;
            if h.num_frames as usize != rec.num_frames {
                return Err(NastError::Validation {
                    utterance: rec.utterance_id,
                    message: format!(
                        "num_frames {} but feature header declares {}",
                        rec.num_frames, h.num_frames
                    ),
                });
            }
        }
        records.push(rec);
    }
    Ok(Manifest { root, records })
}

/// Writes records as JSON lines. Phoneme files are not (re)written here.
pub fn write_manifest(path: impl AsRef<Path>, records: &[UtteranceRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| NastError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        let line = ManifestLine {
            id: rec.utterance_id.clone(),
            feature_path: rec.feature_path.to_string_lossy().into_owned(),
            speaker: rec.speaker_id.clone(),
            num_frames: rec.num_frames,
            phoneme_path: rec
                .phoneme_path
                .as_ref()
                .map(|p| p.to_string_lossy().into_owned()),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| NastError::io(path, e))?;
    }
    w.flush().map_err(|e| NastError::io(path, e))
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[u32]) -> Result<()> {
    let path = path.as_ref();
    let mut line = labels
        .iter()
        .map(u32::to_string)
        .collect::<Vec<_>>()
        .join(" ");
    line.push('\n');
    fs::write(path, line).map_err(|e| NastError::io(path, e))
}

/// Parameters of the labeled synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_utterances: usize,
    pub num_phonemes: usize,
    pub num_speakers: usize,
    pub feature_dim: usize,
    pub mean_duration_frames: f64,
    pub prototype_scale: f64,
    pub noise_scale: f64,
    pub speaker_offset_scale: f64,
    /// Utterance lengths are drawn uniformly from `min_frames..=max_frames`.
    pub min_frames: usize,
    pub max_frames: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_utterances: 200,
            num_phonemes: 8,
            num_speakers: 2,
            feature_dim: 16,
            mean_duration_frames: 4.0,
            prototype_scale: 1.0,
            noise_scale: 0.1,
            speaker_offset_scale: 1.0,
            min_frames: 30,
            max_frames: 60,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NastError::InvalidParameter(m.to_string()));
        if self.num_utterances == 0
            || self.num_phonemes == 0
            || self.num_speakers == 0
            || self.feature_dim == 0
        {
            return bad("synthetic counts must be >= 1");
        }
        if !(self.mean_duration_frames >= 1.0) {
            return bad("mean_duration_frames must be >= 1");
        }
        if !(self.prototype_scale > 0.0) {
            return bad("prototype_scale must be > 0");
        }
        if !(self.noise_scale >= 0.0) || !(self.speaker_offset_scale >= 0.0) {
            return bad("noise_scale and speaker_offset_scale must be >= 0");
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad("need 1 <= min_frames <= max_frames");
        }
        Ok(())
    }
}

/// Ground truth of a synthetic corpus, written next to its manifest.
#[derive(Debug, Clone)]
pub struct SyntheticTruth {
    /// `P x d` phoneme prototypes.
    pub prototypes: Matrix,
    /// `S x d` speaker offsets.
    pub speaker_offsets: Matrix,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const PROTOTYPES_FILE: &str = "prototypes.nfeat";
pub const SPEAKER_OFFSETS_FILE: &str = "speaker_offsets.nfeat";

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            z * scale
        })
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Generates the labeled corpus into `out_dir` and returns the manifest path.
///
/// Each phoneme has a Gaussian prototype, each speaker a Gaussian offset. An
/// utterance picks a speaker, walks a first-order Markov chain over phonemes
/// with geometric durations, and emits `prototype + offset + noise` per frame.
pub fn synthesize_corpus(spec: &SyntheticSpec, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let feat_dir = out_dir.join("features");
    let phon_dir = out_dir.join("phonemes");
    for d in [out_dir, &feat_dir, &phon_dir] {
        fs::create_dir_all(d).map_err(|e| NastError::io(d, e))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (p_count, d) = (spec.num_phonemes, spec.feature_dim);
    let prototypes = gaussian_matrix(p_count, d, spec.prototype_scale, &mut rng);
    let offsets = gaussian_matrix(spec.num_speakers, d, spec.speaker_offset_scale, &mut rng);

    // transition rows exclude self-loops; durations model the repeats
    let mut transitions = vec![vec![0.0f64; p_count]; p_count];
    for (i, row) in transitions.iter_mut().enumerate() {
        for (j, w) in row.iter_mut().enumerate() {
            if i != j || p_count == 1 {
                *w = rng.random_range(0.1..1.0);
            }
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|w| *w /= s);
    }
    let durations = Geometric::new(1.0 / spec.mean_duration_frames)
        .map_err(|e| NastError::InvalidParameter(e.to_string()))?;
    let noise = Normal::new(0.0, spec.noise_scale)
        .map_err(|e| NastError::InvalidParameter(e.to_string()))?;

    let width = spec.num_utterances.to_string().len().max(5);
    let mut records = Vec::with_capacity(spec.num_utterances);
    for u in 0..spec.num_utterances {
        let id = format!("utt{u:0width$}");
        let speaker = rng.random_range(0..spec.num_speakers);
        let len = rng.random_range(spec.min_frames..=spec.max_frames);
        let mut labels = Vec::with_capacity(len);
        let mut phon = rng.random_range(0..p_count);
        while labels.len() < len {
            let dur = 1 + durations.sample(&mut rng) as usize;
            labels.extend(std::iter::repeat_n(phon as u32, dur.min(len - labels.len())));
            let r: f64 = rng.random();
            let mut acc = 0.0;
            let mut next = p_count - 1;
            for (j, &w) in transitions[phon].iter().enumerate() {
                acc += w;
                if r < acc {
                    next = j;
                    break;
                }
            }
            phon = next;
        }
        let mut data = Vec::with_capacity(len * d);
        for &p in &labels {
            let proto = prototypes.row(p as usize);
            let off = offsets.row(speaker);
            for c in 0..d {
                let eps = if spec.noise_scale > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                data.push((proto[c] + off[c] + eps) as f32);
            }
        }
        let seq = FeatureSequence::new(id.clone(), len, d, data)?;
        let feature_path = PathBuf::from("features").join(format!("{id}.nfeat"));
        let phoneme_path = PathBuf::from("phonemes").join(format!("{id}.txt"));
        write_features(&seq, out_dir.join(&feature_path))?;
        write_labels(out_dir.join(&phoneme_path), &labels)?;
        records.push(UtteranceRecord {
            utterance_id: id,
            feature_path,
            speaker_id: format!("spk{speaker}"),
            phoneme_labels: Some(labels),
            num_frames: len,
            phoneme_path: Some(phoneme_path),
        });
    }

    let to_seq = |name: &str, m: &Matrix| FeatureSequence::from_matrix(name, m);
    write_features(&to_seq("prototypes", &prototypes)?, out_dir.join(PROTOTYPES_FILE))?;
    write_features(&to_seq("speaker_offsets", &offsets)?, out_dir.join(SPEAKER_OFFSETS_FILE))?;

    let manifest = out_dir.join(MANIFEST_FILE);
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}

/// Loads the prototypes and speaker offsets written by [`synthesize_corpus`].
pub fn load_synthetic_truth(dir: impl AsRef<Path>) -> Result<SyntheticTruth> {
    let dir = dir.as_ref();
    Ok(SyntheticTruth {
        prototypes: read_features(dir.join(PROTOTYPES_FILE))?.to_matrix(),
        speaker_offsets: read_features(dir.join(SPEAKER_OFFSETS_FILE))?.to_matrix(),
    })
}
