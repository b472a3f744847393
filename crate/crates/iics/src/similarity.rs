//! Pairwise-similarity constructions: Jaccard overlap of concatenated
//! classification-score vectors, the inter-camera similarity that adds the
//! mu-weighted Jaccard term to a base feature similarity, and k-reciprocal
//! re-ranking as an optional base.

use serde::{Deserialize, Serialize};

use crate::core::{l2_normalize, Embedding, SimKind, SimilarityMatrix};
use crate::{Error, Result};

/// Concatenated per-camera softmax probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub values: Vec<f64>,
    /// (camera index, block length) per camera, in order.
    pub layout: Vec<(usize, usize)>,
}

impl ScoreVector {
    pub fn new(values: Vec<f64>, layout: Vec<(usize, usize)>) -> Result<Self> {
        let total: usize = layout.iter().map(|&(_, m)| m).sum();
        if total != values.len() {
            return Err(Error::DimensionMismatch("score vector layout".into()));
        }
        let mut at = 0;
        for &(c, m) in &layout {
            let block = &values[at..at + m];
            if block.iter().any(|&v| v < 0.0) {
                return Err(Error::DimensionMismatch(format!("negative score in camera {c}")));
            }
            let sum: f64 = block.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::DimensionMismatch(format!(
                    "camera {c} block sums to {sum}, expected 1"
                )));
            }
            at += m;
        }
        Ok(ScoreVector { values, layout })
    }
}

/// Jaccard overlap of two score vectors:
/// sum of elementwise min over sum of elementwise max, in [0, 1].
pub fn jaccard_delta(a: &ScoreVector, b: &ScoreVector) -> Result<f64> {
    if a.layout != b.layout {
        return Err(Error::DimensionMismatch("score vector layouts differ".into()));
    }
    let mut min_sum = 0.0;
    let mut max_sum = 0.0;
    for (&x, &y) in a.values.iter().zip(&b.values) {
        min_sum += x.min(y);
        max_sum += x.max(y);
    }
    if max_sum == 0.0 {
        return Ok(1.0); // identical all-zero vectors
    }
    Ok(min_sum / max_sum)
}

/// Pairwise Jaccard overlaps: symmetric, unit diagonal, entries in [0, 1].
pub fn jaccard_matrix(scores: &[ScoreVector]) -> Result<Vec<f64>> {
    let n = scores.len();
    for s in &scores[1..] {
        if s.layout != scores[0].layout {
            return Err(Error::DimensionMismatch("score vector layouts differ".into()));
        }
    }
    let mut values = vec![0.0; n * n];
    use rayon::prelude::*;
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row = vec![0.0; n];
            for j in 0..n {
                row[j] = if i == j {
                    1.0
                } else {
                    jaccard_delta(&scores[i], &scores[j]).expect("uniform layout")
                };
            }
            row
        })
        .collect();
    for (i, row) in rows.into_iter().enumerate() {
        values[i * n..(i + 1) * n].copy_from_slice(&row);
    }
    // Mirror for exact symmetry (min/max are symmetric, but keep it bitwise).
    for i in 0..n {
        for j in (i + 1)..n {
            values[j * n + i] = values[i * n + j];
        }
    }
    Ok(values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterSimConfig {
    /// Weight of the Jaccard term for standalone similarity computations.
    /// The training loop ignores this and uses its own decaying schedule
    /// seeded from `PipelineConfig::mu0`.
    pub mu: f64,
    pub base_kind: BaseKind,
    pub rerank_k1: usize,
    pub rerank_k2: usize,
    pub rerank_lambda: f64,
    /// When true, the Jaccard term is only added to cross-camera pairs.
    pub delta_cross_camera_only: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseKind {
    Cosine,
    Reranked,
}

impl Default for InterSimConfig {
    fn default() -> Self {
        InterSimConfig {
            mu: 0.02,
            base_kind: BaseKind::Cosine,
            rerank_k1: 20,
            rerank_k2: 6,
            rerank_lambda: 0.3,
            delta_cross_camera_only: true,
        }
    }
}

/// Inter-camera similarity: base + mu * delta.
pub fn inter_camera_similarity(
    base: &SimilarityMatrix,
    delta: &[f64],
    mu: f64,
) -> Result<SimilarityMatrix> {
    let n = base.n;
    if delta.len() != n * n {
        return Err(Error::DimensionMismatch("delta shape".into()));
    }
    let values: Vec<f64> = base
        .values
        .iter()
        .zip(delta)
        .map(|(&b, &d)| b + mu * d)
        .collect();
    Ok(SimilarityMatrix { n, values, kind: SimKind::Inter })
}

/// Standard k-reciprocal re-ranking over a set of embeddings, returned as a
/// similarity matrix (1 - final distance), symmetrized by averaging with its
/// transpose.
pub fn k_reciprocal_rerank(
    embeddings: &[Embedding],
    k1: usize,
    k2: usize,
    lambda: f64,
) -> Result<SimilarityMatrix> {
    let n = embeddings.len();
    if !(n > k1 && k1 > k2 && k2 >= 1) {
        return Err(Error::InvalidConfig(format!(
            "rerank requires n > k1 > k2 >= 1, got n={n}, k1={k1}, k2={k2}"
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidConfig("rerank lambda must be in [0, 1]".into()));
    }

    // Squared Euclidean distance on unit vectors, normalized into [0, 1] by
    // the global maximum so the original-distance term stays symmetric.
    let unit: Vec<Vec<f64>> =
        embeddings.iter().map(|e| l2_normalize(&e.vector)).collect::<Result<_>>()?;
    let mut dist = vec![vec![0.0; n]; n];
    let mut max = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let d2: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            dist[i][j] = d2;
            max = max.max(d2);
        }
    }
    if max > 0.0 {
        for row in dist.iter_mut() {
            for v in row.iter_mut() {
                *v /= max;
            }
        }
    }

    // Rank lists ascending by distance, index as tie-break.
    let rank: Vec<Vec<usize>> = dist
        .iter()
        .map(|row| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap().then(a.cmp(&b)));
            idx
        })
        .collect();

    let reciprocal = |i: usize, k: usize| -> Vec<usize> {
        let forward = &rank[i][..k + 1];
        forward
            .iter()
            .copied()
            .filter(|&j| rank[j][..k + 1].contains(&i))
            .collect()
    };

    let half_k1 = ((k1 as f64) / 2.0).round() as usize;
    let mut encoding = vec![vec![0.0; n]; n];
    for i in 0..n {
        let r_i = reciprocal(i, k1);
        let mut expanded = r_i.clone();
        for &cand in &r_i {
            let r_cand = reciprocal(cand, half_k1);
            let overlap = r_cand.iter().filter(|j| r_i.contains(j)).count();
            if 3 * overlap > 2 * r_cand.len() {
                expanded.extend_from_slice(&r_cand);
            }
        }
        expanded.sort_unstable();
        expanded.dedup();
        // Gaussian-weighted encoding over the expanded reciprocal set.
        let weights: Vec<f64> = expanded.iter().map(|&j| (-dist[i][j]).exp()).collect();
        let sum: f64 = weights.iter().sum();
        for (&j, w) in expanded.iter().zip(&weights) {
            encoding[i][j] = w / sum;
        }
    }

    // Local query expansion over the k2 nearest neighbors.
    let encoding = if k2 > 1 {
        let mut expanded = vec![vec![0.0; n]; n];
        for i in 0..n {
            for &j in &rank[i][..k2] {
                for t in 0..n {
                    expanded[i][t] += encoding[j][t] / k2 as f64;
                }
            }
        }
        expanded
    } else {
        encoding
    };

    // Jaccard distance between encoding vectors (each sums to 1).
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let min_sum: f64 = encoding[i]
                .iter()
                .zip(&encoding[j])
                .map(|(a, b)| a.min(*b))
                .sum();
            let jaccard_dist = 1.0 - min_sum / (2.0 - min_sum);
            let final_dist = (1.0 - lambda) * jaccard_dist + lambda * dist[i][j];
            values[i * n + j] = 1.0 - final_dist;
        }
    }
    // Symmetrize by averaging with the transpose.
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (values[i * n + j] + values[j * n + i]);
            values[i * n + j] = avg;
            values[j * n + i] = avg;
        }
    }
    Ok(SimilarityMatrix { n, values, kind: SimKind::Reranked })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::Rng;

    fn sv(blocks: &[&[f64]]) -> ScoreVector {
        let layout: Vec<(usize, usize)> =
            blocks.iter().enumerate().map(|(c, b)| (c, b.len())).collect();
        let values: Vec<f64> = blocks.concat();
        ScoreVector::new(values, layout).unwrap()
    }

    fn random_score(rng: &mut Rng, blocks: &[usize]) -> ScoreVector {
        let mut values = Vec::new();
        let mut layout = Vec::new();
        for (c, &m) in blocks.iter().enumerate() {
            let raw: Vec<f64> = (0..m).map(|_| rng.uniform() + 1e-3).collect();
            let sum: f64 = raw.iter().sum();
            values.extend(raw.into_iter().map(|v| v / sum));
            layout.push((c, m));
        }
        ScoreVector::new(values, layout).unwrap()
    }

    #[test]
    fn delta_self_is_one() {
        let s = sv(&[&[0.6, 0.4]]);
        assert_eq!(jaccard_delta(&s, &s).unwrap(), 1.0);
    }

    #[test]
    fn delta_disjoint_supports_is_zero() {
        let a = sv(&[&[1.0, 0.0], &[1.0, 0.0, 0.0]]);
        let b = sv(&[&[0.0, 1.0], &[0.0, 0.0, 1.0]]);
        assert_eq!(jaccard_delta(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn delta_hand_case_three_sevenths() {
        // min-sum 0.2 + 0.4 = 0.6, max-sum 0.6 + 0.8 = 1.4
        let a = sv(&[&[0.6, 0.4]]);
        let b = sv(&[&[0.2, 0.8]]);
        let delta = jaccard_delta(&a, &b).unwrap();
        assert!((delta - 3.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn delta_symmetric_and_bounded() {
        let mut rng = Rng::new(1);
        for _ in 0..50 {
            let a = random_score(&mut rng, &[3, 4]);
            let b = random_score(&mut rng, &[3, 4]);
            let ab = jaccard_delta(&a, &b).unwrap();
            let ba = jaccard_delta(&b, &a).unwrap();
            assert_eq!(ab, ba);
            assert!((0.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn delta_layout_mismatch() {
        let a = sv(&[&[1.0]]);
        let b = sv(&[&[0.5, 0.5]]);
        assert!(jaccard_delta(&a, &b).is_err());
    }

    #[test]
    fn matrix_all_identical_is_ones() {
        let s = sv(&[&[0.3, 0.7]]);
        let m = jaccard_matrix(&[s.clone(), s.clone(), s]).unwrap();
        assert!(m.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn matrix_matches_pairwise_oracle() {
        let mut rng = Rng::new(2);
        let scores: Vec<ScoreVector> = (0..4).map(|_| random_score(&mut rng, &[2, 3])).collect();
        let m = jaccard_matrix(&scores).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j {
                    1.0
                } else {
                    jaccard_delta(&scores[i], &scores[j]).unwrap()
                };
                assert!((m[i * 4 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matrix_single_vector() {
        let s = sv(&[&[0.5, 0.5]]);
        assert_eq!(jaccard_matrix(&[s]).unwrap(), vec![1.0]);
    }

    #[test]
    fn inter_mu_zero_is_base() {
        let base =
            SimilarityMatrix::from_values(vec![1.0, 0.2, 0.2, 1.0], 2, SimKind::Cosine).unwrap();
        let delta = vec![1.0, 0.9, 0.9, 1.0];
        let s = inter_camera_similarity(&base, &delta, 0.0).unwrap();
        assert_eq!(s.values, base.values);
        assert_eq!(s.kind, SimKind::Inter);
    }

    #[test]
    fn inter_elementwise_oracle() {
        let base = SimilarityMatrix::from_values(
            vec![1.0, 0.5, 0.1, 0.5, 1.0, 0.2, 0.1, 0.2, 1.0],
            3,
            SimKind::Cosine,
        )
        .unwrap();
        let delta = vec![1.0, 0.3, 0.6, 0.3, 1.0, 0.4, 0.6, 0.4, 1.0];
        let s = inter_camera_similarity(&base, &delta, 0.02).unwrap();
        for i in 0..9 {
            assert!((s.values[i] - (base.values[i] + 0.02 * delta[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn inter_all_ones_delta_uniform_shift() {
        let base =
            SimilarityMatrix::from_values(vec![1.0, 0.2, 0.2, 1.0], 2, SimKind::Cosine).unwrap();
        let delta = vec![1.0; 4];
        let s = inter_camera_similarity(&base, &delta, 0.1).unwrap();
        assert!((s.get(0, 1) - 0.3).abs() < 1e-15);
        assert!((s.get(0, 1) - s.get(1, 0)).abs() < 1e-15);
    }

    #[test]
    fn inter_never_decreases_and_scales_linearly() {
        let mut rng = Rng::new(3);
        let n = 5;
        let mut vals = vec![0.0; n * n];
        for i in 0..n {
            vals[i * n + i] = 1.0;
            for j in (i + 1)..n {
                let v = rng.uniform();
                vals[i * n + j] = v;
                vals[j * n + i] = v;
            }
        }
        let base = SimilarityMatrix::from_values(vals, n, SimKind::Cosine).unwrap();
        let mut delta = vec![0.0; n * n];
        for i in 0..n {
            delta[i * n + i] = 1.0;
            for j in (i + 1)..n {
                let v = rng.uniform();
                delta[i * n + j] = v;
                delta[j * n + i] = v;
            }
        }
        let s1 = inter_camera_similarity(&base, &delta, 0.02).unwrap();
        let s3 = inter_camera_similarity(&base, &delta, 0.06).unwrap();
        for i in 0..n * n {
            assert!(s1.values[i] >= base.values[i]);
            let d1 = s1.values[i] - base.values[i];
            let d3 = s3.values[i] - base.values[i];
            assert!((d3 - 3.0 * d1).abs() < 1e-12);
        }
    }

    fn cluster_points(rng: &mut Rng, center: &[f64], count: usize, spread: f64) -> Vec<Vec<f64>> {
        (0..count)
            .map(|_| center.iter().map(|&c| c + spread * rng.normal()).collect())
            .collect()
    }

    #[test]
    fn rerank_separates_tight_clusters() {
        let mut rng = Rng::new(4);
        let mut points = cluster_points(&mut rng, &[5.0, 0.0, 0.0], 6, 0.05);
        points.extend(cluster_points(&mut rng, &[0.0, 5.0, 0.0], 6, 0.05));
        let embs: Vec<Embedding> = points
            .into_iter()
            .enumerate()
            .map(|(i, v)| Embedding { sample_id: i, vector: v })
            .collect();
        let s = k_reciprocal_rerank(&embs, 5, 2, 0.3).unwrap();
        let mut min_within = f64::INFINITY;
        let mut max_cross = f64::NEG_INFINITY;
        for i in 0..12 {
            for j in 0..12 {
                if i == j {
                    continue;
                }
                let same = (i < 6) == (j < 6);
                if same {
                    min_within = min_within.min(s.get(i, j));
                } else {
                    max_cross = max_cross.max(s.get(i, j));
                }
            }
        }
        assert!(min_within > max_cross);
    }

    #[test]
    fn rerank_lambda_one_preserves_cosine_order() {
        let mut rng = Rng::new(5);
        let embs: Vec<Embedding> = (0..10)
            .map(|i| Embedding {
                sample_id: i,
                vector: (0..4).map(|_| rng.normal()).collect(),
            })
            .collect();
        let s = k_reciprocal_rerank(&embs, 5, 2, 1.0).unwrap();
        let cos = crate::core::cosine_matrix(&embs).unwrap();
        // With lambda = 1 the final distance is the scaled original distance,
        // so the per-row ranking must equal the cosine ranking exactly.
        for i in 0..10 {
            let mut order_s: Vec<usize> = (0..10).filter(|&j| j != i).collect();
            order_s.sort_by(|&a, &b| s.get(i, b).partial_cmp(&s.get(i, a)).unwrap());
            let mut order_c: Vec<usize> = (0..10).filter(|&j| j != i).collect();
            order_c.sort_by(|&a, &b| cos.get(i, b).partial_cmp(&cos.get(i, a)).unwrap());
            assert_eq!(order_s, order_c, "row {i}");
        }
    }

    #[test]
    fn rerank_parameter_bounds() {
        let embs: Vec<Embedding> = (0..5)
            .map(|i| Embedding { sample_id: i, vector: vec![i as f64, 1.0] })
            .collect();
        assert!(k_reciprocal_rerank(&embs, 5, 2, 0.3).is_err()); // n > k1 violated
        assert!(k_reciprocal_rerank(&embs, 4, 4, 0.3).is_err()); // k1 > k2 violated
        assert!(k_reciprocal_rerank(&embs, 4, 2, 1.5).is_err());
    }
}
