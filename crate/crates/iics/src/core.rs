//! Shared data model, deterministic RNG, and dense linear-algebra primitives.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Hard cap on dataset size; similarity matrices are dense n×n.
pub const MAX_SAMPLES: usize = 20_000;

/// Index of a camera, dense in `[0, C)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CameraId(pub usize);

/// One data item: a `[channels, length]` signal recorded by one camera.
/// `true_identity` is present only for synthetic data.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub camera: CameraId,
    /// Row-major `[channels, length]`.
    pub signal: Vec<f64>,
    pub true_identity: Option<usize>,
}

/// Provenance of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DatasetMeta {
    Synthetic { seed: u64 },
    Imported { source: String },
}

/// Camera-partitioned dataset. Sample ids are `0..n-1` in order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_cameras: usize,
    pub channels: usize,
    pub length: usize,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(
        samples: Vec<Sample>,
        num_cameras: usize,
        channels: usize,
        length: usize,
        meta: DatasetMeta,
    ) -> Result<Self> {
        if num_cameras < 2 {
            return Err(Error::InvalidDataset("need at least 2 cameras".into()));
        }
        if samples.len() > MAX_SAMPLES {
            return Err(Error::InvalidDataset(format!(
                "{} samples exceeds cap of {MAX_SAMPLES}",
                samples.len()
            )));
        }
        let mut counts = vec![0usize; num_cameras];
        for (i, s) in samples.iter().enumerate() {
            if s.id != i {
                return Err(Error::InvalidDataset(format!(
                    "sample id {} at position {i}",
                    s.id
                )));
            }
            if s.camera.0 >= num_cameras {
                return Err(Error::InvalidDataset(format!(
                    "camera {} out of range (C={num_cameras})",
                    s.camera.0
                )));
            }
            if s.signal.len() != channels * length {
                return Err(Error::InvalidDataset(format!(
                    "sample {i}: signal length {} != {channels}x{length}",
                    s.signal.len()
                )));
            }
            if !s.signal.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidDataset(format!("sample {i}: non-finite signal")));
            }
            counts[s.camera.0] += 1;
        }
        if let Some(c) = counts.iter().position(|&c| c == 0) {
            return Err(Error::InvalidDataset(format!("camera {c} has no samples")));
        }
        Ok(Dataset { samples, num_cameras, channels, length, meta })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Ground-truth identities, if every sample carries one.
    pub fn identities(&self) -> Option<Vec<usize>> {
        self.samples.iter().map(|s| s.true_identity).collect()
    }

    pub fn cameras(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.camera.0).collect()
    }
}

/// A d-dimensional feature vector attached to a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub sample_id: usize,
    pub vector: Vec<f64>,
}

/// Pseudo-label assignment: one label in `[0, k)` per sample in scope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub k: usize,
}

impl ClusterAssignment {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        let mut seen = vec![false; k];
        for &l in &labels {
            if l >= k {
                return Err(Error::Clustering(format!("label {l} out of range (k={k})")));
            }
            seen[l] = true;
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::Clustering("empty cluster".into()));
        }
        Ok(ClusterAssignment { labels, k })
    }

    /// Member indices per cluster, in label order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimKind {
    Cosine,
    Reranked,
    Inter,
}

/// Dense symmetric pairwise similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub n: usize,
    /// Row-major n×n.
    pub values: Vec<f64>,
    pub kind: SimKind,
}

impl SimilarityMatrix {
    pub fn from_values(values: Vec<f64>, n: usize, kind: SimKind) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::DimensionMismatch(format!(
                "similarity matrix: {} values for n={n}",
                values.len()
            )));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if (values[i * n + j] - values[j * n + i]).abs() > 1e-9 {
                    return Err(Error::DimensionMismatch(format!(
                        "asymmetric similarity at ({i},{j})"
                    )));
                }
            }
        }
        Ok(SimilarityMatrix { n, values, kind })
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// Submatrix restricted to `ids`, preserving order.
    pub fn select(&self, ids: &[usize]) -> SimilarityMatrix {
        let m = ids.len();
        let mut values = vec![0.0; m * m];
        for (a, &i) in ids.iter().enumerate() {
            for (b, &j) in ids.iter().enumerate() {
                values[a * m + b] = self.get(i, j);
            }
        }
        SimilarityMatrix { n: m, values, kind: self.kind }
    }
}

/// Deterministic, portable random number generator (ChaCha8, counter-based).
/// Identical seeds give identical streams on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    pub seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Child generator with an independent stream, derived deterministically.
    pub fn fork(&mut self, tag: u64) -> Rng {
        let seed = self.inner.next_u64() ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        Rng::new(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.inner.sample(rand_distr::StandardNormal)
    }

    pub fn gen_range(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.gen_range(lo..hi)
    }

    /// Fisher-Yates shuffle, in place.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            items.swap(i, j);
        }
    }

    /// `count` distinct indices from `[0, n)` in draw order.
    pub fn sample_indices(&mut self, n: usize, count: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx.truncate(count);
        idx
    }
}

/// v/‖v‖ for nonzero v; vectors with norm ≤ 1e-12 pass through unchanged.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFiniteVector);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-12 {
        Ok(v.iter().map(|x| x / norm).collect())
    } else {
        Ok(v.to_vec())
    }
}

/// Pairwise cosine similarity over a set of same-dimension embeddings.
pub fn cosine_matrix(embeddings: &[Embedding]) -> Result<SimilarityMatrix> {
    let n = embeddings.len();
    if n == 0 {
        return Ok(SimilarityMatrix { n: 0, values: Vec::new(), kind: SimKind::Cosine });
    }
    let d = embeddings[0].vector.len();
    for e in embeddings {
        if e.vector.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "embedding for sample {} has dim {}, expected {d}",
                e.sample_id,
                e.vector.len()
            )));
        }
    }
    let normalized: Vec<Vec<f64>> =
        embeddings.iter().map(|e| l2_normalize(&e.vector)).collect::<Result<_>>()?;

    let mut values = vec![0.0; n * n];
    // Parallel over rows; each row is written by exactly one worker so the
    // result is independent of the partitioning.
    use rayon::prelude::*;
    values
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, row)| {
            for j in 0..n {
                let dot: f64 =
                    normalized[i].iter().zip(&normalized[j]).map(|(a, b)| a * b).sum();
                row[j] = dot.clamp(-1.0, 1.0);
            }
        });
    // Exact symmetry: mirror the upper triangle.
    for i in 0..n {
        for j in (i + 1)..n {
            values[j * n + i] = values[i * n + j];
        }
    }
    Ok(SimilarityMatrix { n, values, kind: SimKind::Cosine })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l2_normalize_three_four_five() {
        let out = l2_normalize(&[3.0, 4.0]).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-15);
        assert!((out[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_normalize_zero_passthrough() {
        assert_eq!(l2_normalize(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn l2_normalize_below_threshold_unchanged() {
        assert_eq!(l2_normalize(&[1e-300, 0.0]).unwrap(), vec![1e-300, 0.0]);
    }

    #[test]
    fn l2_normalize_rejects_nan() {
        assert!(matches!(l2_normalize(&[f64::NAN, 1.0]), Err(Error::NonFiniteVector)));
    }

    fn embs(vs: &[&[f64]]) -> Vec<Embedding> {
        vs.iter()
            .enumerate()
            .map(|(i, v)| Embedding { sample_id: i, vector: v.to_vec() })
            .collect()
    }

    #[test]
    fn cosine_identical_vectors() {
        let s = cosine_matrix(&embs(&[&[1.0, 2.0], &[1.0, 2.0]])).unwrap();
        assert!((s.get(0, 1) - 1.0).abs() < 1e-12);
        assert!((s.get(1, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_orthogonal_vectors() {
        let s = cosine_matrix(&embs(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert!(s.get(0, 1).abs() < 1e-15);
    }

    #[test]
    fn cosine_matches_scalar_loop_oracle() {
        let mut rng = Rng::new(42);
        let vecs: Vec<Vec<f64>> =
            (0..5).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        let e: Vec<Embedding> = vecs
            .iter()
            .cloned()
            .enumerate()
            .map(|(i, v)| Embedding { sample_id: i, vector: v })
            .collect();
        let s = cosine_matrix(&e).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                // Independent scalar-loop computation.
                let ni = vecs[i].iter().map(|x| x * x).sum::<f64>().sqrt();
                let nj = vecs[j].iter().map(|x| x * x).sum::<f64>().sqrt();
                let mut dot = 0.0;
                for k in 0..3 {
                    dot += vecs[i][k] / ni * (vecs[j][k] / nj);
                }
                assert!((s.get(i, j) - dot).abs() < 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn cosine_dimension_mismatch() {
        assert!(cosine_matrix(&embs(&[&[1.0, 0.0], &[1.0]])).is_err());
    }

    #[test]
    fn rng_stream_reproducible() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn similarity_matrix_rejects_asymmetry() {
        let values = vec![1.0, 0.5, 0.6, 1.0];
        assert!(SimilarityMatrix::from_values(values, 2, SimKind::Cosine).is_err());
    }
}
