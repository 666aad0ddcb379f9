//! Corpus tokenization, unit files, and the k-means baseline quantizer.
//!
//! Unit files are UTF-8 text with one utterance per line:
//! `utterance_id<TAB>u1 u2 u3 ...` (0-based ids, raw and not de-duplicated).

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NastError, Result};
use crate::featureio::{FeatureSequence, Manifest};
use crate::model::NastModel;
use crate::par::{self, Mode};
use crate::tensor::Matrix;

/// Discrete units of one utterance.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct UnitSequence {
    pub units: Vec<u32>,
    pub utterance_id: String,
}

impl UnitSequence {
    pub fn new(utterance_id: impl Into<String>, units: Vec<u32>) -> Self {
        UnitSequence {
            units,
            utterance_id: utterance_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }
}

/// Collapses runs of repeated units to a single occurrence.
pub fn dedup(z: &UnitSequence) -> UnitSequence {
    let mut units = z.units.clone();
    units.dedup();
    UnitSequence {
        units,
        utterance_id: z.utterance_id.clone(),
    }
}

/// Anything that maps a feature sequence to one unit per frame.
pub trait Quantizer: Sync {
    fn num_units(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn quantize_sequence(&self, seq: &FeatureSequence) -> Result<UnitSequence>;
}

impl Quantizer for NastModel {
    fn num_units(&self) -> usize {
        self.config().num_units
    }

    fn input_dim(&self) -> usize {
        self.config().input_dim
    }

    fn quantize_sequence(&self, seq: &FeatureSequence) -> Result<UnitSequence> {
        self.quantize(seq)
    }
}

impl Quantizer for KMeansModel {
    fn num_units(&self) -> usize {
        self.centroids.rows()
    }

    fn input_dim(&self) -> usize {
        self.centroids.cols()
    }

    fn quantize_sequence(&self, seq: &FeatureSequence) -> Result<UnitSequence> {
        kmeans_assign(self, seq)
    }
}

/// Quantizes every utterance of `manifest`, in manifest order.
pub fn tokenize_manifest<Q: Quantizer + ?Sized>(
    quantizer: &Q,
    manifest: &Manifest,
    mode: Mode,
) -> Result<Vec<UnitSequence>> {
    par::try_map(mode, &manifest.records, |rec| {
        let seq = manifest.load_features(rec)?;
        quantizer.quantize_sequence(&seq)
    })
}

/// Quantizes the corpus and writes a unit file to `out_path`.
pub fn tokenize_corpus<Q: Quantizer + ?Sized>(
    quantizer: &Q,
    manifest: &Manifest,
    out_path: impl AsRef<Path>,
) -> Result<Vec<UnitSequence>> {
    let units = tokenize_manifest(quantizer, manifest, Mode::default())?;
    write_units(out_path, &units)?;
    Ok(units)
}

pub fn write_units(path: impl AsRef<Path>, seqs: &[UnitSequence]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| NastError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in seqs {
        if s.utterance_id.contains(['\t', '\n']) {
            return Err(NastError::InvalidParameter(format!(
                "utterance id {:?} contains a tab or newline",
                s.utterance_id
            )));
        }
        let body: Vec<String> = s.units.iter().map(u32::to_string).collect();
        writeln!(w, "{}\t{}", s.utterance_id, body.join(" ")).map_err(|e| NastError::io(path, e))?;
    }
    w.flush().map_err(|e| NastError::io(path, e))
}

pub fn read_units(path: impl AsRef<Path>) -> Result<Vec<UnitSequence>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| NastError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| NastError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| NastError::Manifest {
            line: i + 1,
            message,
        };
        let (id, body) = line
            .split_once('\t')
            .ok_or_else(|| malformed("missing tab between id and units".into()))?;
        let units = body
            .split_whitespace()
            .map(|tok| {
                tok.parse::<u32>()
                    .map_err(|_| malformed(format!("bad unit {tok:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(UnitSequence::new(id, units));
    }
    Ok(out)
}

/// Centroids plus the inertia recorded at every assignment step of the fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansModel {
    #[serde(with = "matrix_rows")]
    pub centroids: Matrix,
    pub inertia_history: Vec<f64>,
}

mod matrix_rows {
    use super::Matrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<&[f64]> = m.row_iter().collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Matrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

impl KMeansModel {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| NastError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| NastError::io(path, e))?;
        let m: KMeansModel = serde_json::from_str(&text)?;
        if m.centroids.rows() == 0 {
            return Err(NastError::Empty(format!("no centroids in {}", path.display())));
        }
        Ok(m)
    }

    /// One Lloyd iteration (assign, then recompute means) from the current
    /// centroids.
    pub fn lloyd_step(&self, frames: &Matrix) -> Result<KMeansModel> {
        check_frames(frames, self.centroids.cols())?;
        let (labels, inertia) = assign_all(&self.centroids, frames, Mode::default());
        let centroids = update_centroids(&self.centroids, frames, &labels);
        let mut inertia_history = self.inertia_history.clone();
        inertia_history.push(inertia);
        Ok(KMeansModel {
            centroids,
            inertia_history,
        })
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by squared Euclidean distance, lowest index on ties.
fn nearest(centroids: &Matrix, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.row_iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign_all(centroids: &Matrix, frames: &Matrix, mode: Mode) -> (Vec<usize>, f64) {
    let pairs = par::map_range(mode, frames.rows(), |i| nearest(centroids, frames.row(i)));
    let inertia = pairs.iter().map(|p| p.1).sum();
    (pairs.into_iter().map(|p| p.0).collect(), inertia)
}

/// Cluster means; an empty cluster takes the point of the largest cluster
/// that lies farthest from that cluster's previous centroid.
fn update_centroids(old: &Matrix, frames: &Matrix, labels: &[usize]) -> Matrix {
    let (k, d) = old.shape();
    let mut sums = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, x) in sums.row_mut(l).iter_mut().zip(frames.row(i)) {
            *s += x;
        }
    }
    let mut taken = vec![false; frames.rows()];
    for j in 0..k {
        if counts[j] > 0 {
            let n = counts[j] as f64;
            for s in sums.row_mut(j) {
                *s /= n;
            }
        }
    }
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        let largest = (0..k).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap();
        let mut far = None;
        let mut far_d = -1.0;
        for (i, &l) in labels.iter().enumerate() {
            if l == largest && !taken[i] {
                let dist = sq_dist(frames.row(i), old.row(largest));
                if dist > far_d {
                    far_d = dist;
                    far = Some(i);
                }
            }
        }
        if let Some(i) = far {
            taken[i] = true;
            sums.row_mut(j).copy_from_slice(frames.row(i));
        } else {
            sums.row_mut(j).copy_from_slice(old.row(j));
        }
    }
    sums
}

fn check_frames(frames: &Matrix, dim: usize) -> Result<()> {
    if frames.cols() != dim {
        return Err(NastError::dims(dim, frames.cols(), "k-means frame dimension"));
    }
    if let Some((r, c)) = frames.first_non_finite() {
        return Err(NastError::NonFinite { row: r, col: c });
    }
    Ok(())
}

fn count_distinct_up_to(frames: &Matrix, limit: usize) -> usize {
    let mut seen: HashSet<Vec<u64>> = HashSet::new();
    for row in frames.row_iter() {
        seen.insert(row.iter().map(|x| (x + 0.0).to_bits()).collect());
        if seen.len() >= limit {
            break;
        }
    }
    seen.len()
}

/// k-means++ seeding: the first centre uniformly, each next one with
/// probability proportional to its squared distance from the chosen set.
fn kmeans_pp(frames: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = frames.rows();
    let mut centroids = Matrix::zeros(k, frames.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(frames.row(first));
    let mut d2: Vec<f64> = frames.row_iter().map(|x| sq_dist(x, frames.row(first))).collect();
    for j in 1..k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &w) in d2.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            pick = Some(i);
            if target < w {
                break;
            }
            target -= w;
        }
        let pick = pick.expect("fewer distinct points than clusters");
        centroids.row_mut(j).copy_from_slice(frames.row(pick));
        for (i, dist) in d2.iter_mut().enumerate() {
            *dist = dist.min(sq_dist(frames.row(i), frames.row(pick)));
        }
    }
    centroids
}

/// Lloyd's algorithm from k-means++ seeds. Stops once no centroid moves by
/// `tol` or more (Euclidean), or after `max_iters` iterations.
pub fn kmeans_fit(frames: &Matrix, k: usize, seed: u64, max_iters: usize, tol: f64) -> Result<KMeansModel> {
    if k == 0 {
        return Err(NastError::InvalidParameter("k must be >= 1".into()));
    }
    if frames.rows() < k {
        return Err(NastError::InvalidParameter(format!(
            "k-means needs at least k = {k} frames, got {}",
            frames.rows()
        )));
    }
    check_frames(frames, frames.cols())?;
    if k > 1 && count_distinct_up_to(frames, k) < k {
        return Err(NastError::InvalidParameter(format!(
            "data has fewer than k = {k} distinct points"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(frames, k, &mut rng);
    let mut inertia_history = Vec::new();
    for _ in 0..max_iters {
        let (labels, inertia) = assign_all(&centroids, frames, Mode::default());
        inertia_history.push(inertia);
        let next = update_centroids(&centroids, frames, &labels);
        let shift = centroids
            .row_iter()
            .zip(next.row_iter())
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < tol {
            break;
        }
    }
    let (_, inertia) = assign_all(&centroids, frames, Mode::default());
    inertia_history.push(inertia);
    Ok(KMeansModel {
        centroids,
        inertia_history,
    })
}

/// Stacks the frames of several sequences into one `N x d` matrix.
pub fn stack_frames(seqs: &[FeatureSequence]) -> Result<Matrix> {
    let first = seqs
        .first()
        .ok_or_else(|| NastError::Empty("no sequences to stack".into()))?;
    let d = first.dim();
    let mut data = Vec::new();
    for s in seqs {
        if s.dim() != d {
            return Err(NastError::dims(d, s.dim(), format!("features of {}", s.utterance_id)));
        }
        data.extend(s.data().iter().map(|&x| x as f64));
    }
    Matrix::from_vec(data.len() / d, d, data)
}

/// Nearest-centroid unit for every frame of `seq`.
pub fn kmeans_assign(model: &KMeansModel, seq: &FeatureSequence) -> Result<UnitSequence> {
    if seq.dim() != model.centroids.cols() {
        return Err(NastError::dims(
            model.centroids.cols(),
            seq.dim(),
            format!("features of {}", seq.utterance_id),
        ));
    }
    let mut frame = vec![0.0; seq.dim()];
    let units = (0..seq.num_frames())
        .map(|t| {
            for (f, &x) in frame.iter_mut().zip(seq.frame(t)) {
                *f = x as f64;
            }
            nearest(&model.centroids, &frame).0 as u32
        })
        .collect();
    Ok(UnitSequence::new(seq.utterance_id.clone(), units))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn dedup_examples() {
        let z = UnitSequence::new("a", vec![5, 5, 2, 2, 2, 5]);
        assert_eq!(dedup(&z).units, vec![5, 2, 5]);
        assert!(dedup(&UnitSequence::default()).units.is_empty());
        assert_eq!(dedup(&UnitSequence::new("b", vec![1, 2, 1, 2])).units, vec![1, 2, 1, 2]);
    }

    proptest! {
        #[test]
        fn dedup_idempotent_and_shorter(units in proptest::collection::vec(0u32..4, 0..30)) {
            let z = UnitSequence::new("p", units.clone());
            let once = dedup(&z);
            prop_assert_eq!(dedup(&once).clone(), once.clone());
            prop_assert!(once.len() <= z.len());
            let has_repeat = units.windows(2).any(|w| w[0] == w[1]);
            prop_assert_eq!(once.len() == z.len(), !has_repeat);
        }

        #[test]
        fn assignment_matches_brute_force(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = 5;
            let d = 3;
            let centroids = Matrix::from_vec(k, d, (0..k * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let model = KMeansModel { centroids: centroids.clone(), inertia_history: vec![] };
            let data: Vec<f32> = (0..40 * d).map(|_| rng.random_range(-3.0f32..3.0)).collect();
            let seq = FeatureSequence::new("r", 40, d, data).unwrap();
            let got = kmeans_assign(&model, &seq).unwrap().units;
            for t in 0..40 {
                let x: Vec<f64> = seq.frame(t).iter().map(|&v| v as f64).collect();
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for j in 0..k {
                    let mut dist = 0.0;
                    for c in 0..d {
                        dist += (centroids.get(j, c) - x[c]).powi(2);
                    }
                    if dist < best_d {
                        best_d = dist;
                        best = j;
                    }
                }
                prop_assert_eq!(got[t] as usize, best);
            }
        }
    }

    #[test]
    fn unit_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.txt");
        let seqs = vec![UnitSequence::new("a", vec![0, 3, 3]), UnitSequence::new("b", vec![])];
        write_units(&p, &seqs).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "a\t0 3 3\nb\t\n");
        assert_eq!(read_units(&p).unwrap(), seqs);
        fs::write(&p, "a 1 2\n").unwrap();
        assert!(matches!(read_units(&p), Err(NastError::Manifest { line: 1, .. })));
    }

    #[test]
    fn fixed_point_data() {
        let pts = Matrix::from_rows(&[[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]]).unwrap();
        let m = kmeans_fit(&pts, 3, 1, 20, 1e-9).unwrap();
        assert_eq!(*m.inertia_history.last().unwrap(), 0.0);
        let mut rows: Vec<Vec<f64>> = m.centroids.row_iter().map(<[f64]>::to_vec).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(rows, vec![vec![0.0, 0.0], vec![0.0, 5.0], vec![5.0, 0.0]]);
        let again = m.lloyd_step(&pts).unwrap();
        assert_eq!(again.centroids, m.centroids);
    }

    #[test]
    fn single_cluster_is_global_mean() {
        let pts = Matrix::from_rows(&[[1.0, 2.0], [3.0, -2.0], [5.0, 6.0], [-1.0, 0.0]]).unwrap();
        let m = kmeans_fit(&pts, 1, 0, 10, 1e-12).unwrap();
        assert_eq!(m.centroids.row(0), &[2.0, 1.5]);
    }

    #[test]
    fn two_blobs_recover_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spread = 0.5;
        let n = 400;
        let normal = Normal::new(0.0, spread).unwrap();
        let centers = [[-20.0, 0.0], [20.0, 10.0]];
        let mut rows = Vec::new();
        for c in centers {
            for _ in 0..n {
                rows.push(vec![c[0] + normal.sample(&mut rng), c[1] + normal.sample(&mut rng)]);
            }
        }
        let pts = Matrix::from_rows(&rows).unwrap();
        let m = kmeans_fit(&pts, 2, 3, 50, 1e-9).unwrap();
        for (b, c) in centers.iter().enumerate() {
            let blob = &rows[b * n..(b + 1) * n];
            let mean: Vec<f64> = (0..2).map(|j| blob.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
            let best = m
                .centroids
                .row_iter()
                .map(|r| sq_dist(r, &mean).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(best <= 3.0 * spread / (n as f64).sqrt(), "blob {c:?} off by {best}");
        }
        assert!(m.inertia_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn fit_errors() {
        let pts = Matrix::from_rows(&[[1.0], [2.0]]).unwrap();
        assert!(kmeans_fit(&pts, 3, 0, 10, 1e-6).is_err());
        let same = Matrix::filled(10, 2, 4.0);
        assert!(kmeans_fit(&same, 2, 0, 10, 1e-6).is_err());
        assert!(kmeans_fit(&same, 1, 0, 10, 1e-6).is_ok());
    }

    #[test]
    fn assign_rules() {
        let m = KMeansModel {
            centroids: Matrix::from_rows(&[[0.0, 0.0], [2.0, 0.0], [9.0, 9.0], [1.0, 1.0]]).unwrap(),
            inertia_history: vec![],
        };
        let seq = FeatureSequence::new("s", 2, 2, vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(kmeans_assign(&m, &seq).unwrap().units, vec![3, 0]);
        let bad = FeatureSequence::new("wide", 1, 3, vec![0.0; 3]).unwrap();
        let err = kmeans_assign(&m, &bad).unwrap_err();
        assert!(err.to_string().contains("wide"));
    }

    #[test]
    fn model_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = KMeansModel {
            centroids: Matrix::from_rows(&[[0.1, 1.0 / 3.0], [1e-300, -7.25]]).unwrap(),
            inertia_history: vec![3.5, 2.0 / 7.0],
        };
        let p = dir.path().join("km.json");
        m.save(&p).unwrap();
        assert_eq!(KMeansModel::load(&p).unwrap(), m);
    }
}
