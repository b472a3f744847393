//! Agglomerative hierarchical clustering to a fixed cluster count, operating
//! directly on similarity matrices (merge = argmax of linkage similarity).
//! A brute-force O(n^3) reference agglomerator backs the oracle tests.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::core::{ClusterAssignment, SimilarityMatrix};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linkage {
    Average,
    Complete,
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    pub k: usize,
    pub linkage: Linkage,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig { k: 2, linkage: Linkage::Average }
    }
}

/// Candidate merge between cluster slots `i < j`. Ordered so the heap pops
/// the highest similarity first, ties broken by smallest (i, j).
#[derive(Debug, Clone, Copy)]
struct Candidate {
    sim: f64,
    i: usize,
    j: usize,
    version_i: u64,
    version_j: u64,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        // max-heap: larger sim first, then smaller (i, j)
        self.sim
            .partial_cmp(&other.sim)
            .expect("similarities are finite")
            .then_with(|| other.i.cmp(&self.i))
            .then_with(|| other.j.cmp(&self.j))
    }
}

/// Merge the pair of clusters with the highest linkage similarity until `k`
/// clusters remain. Labels are renumbered 0..k-1 by order of lowest member
/// id. Clusters are merged into the lower slot, so a slot id always equals
/// the smallest member id it contains.
pub fn agglomerate(s: &SimilarityMatrix, cfg: &ClusterConfig) -> Result<ClusterAssignment> {
    let n = s.n;
    if cfg.k == 0 || cfg.k > n {
        return Err(Error::Clustering(format!("k={} out of range for n={n}", cfg.k)));
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if (s.get(i, j) - s.get(j, i)).abs() > 1e-9 {
                return Err(Error::Clustering(format!("asymmetric similarity at ({i},{j})")));
            }
        }
    }

    // Pairwise linkage state. For average linkage we track the exact sum of
    // inter-cluster similarities so merges stay associative.
    let mut link = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            link[i * n + j] = s.get(i, j);
        }
    }
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut version = vec![0u64; n];
    let mut parent: Vec<usize> = (0..n).collect();

    let linkage_value = |link: &[f64], size: &[usize], i: usize, j: usize| -> f64 {
        match cfg.linkage {
            Linkage::Average => link[i * n + j] / (size[i] * size[j]) as f64,
            Linkage::Complete | Linkage::Single => link[i * n + j],
        }
    };

    let mut heap = BinaryHeap::new();
    for i in 0..n {
        for j in (i + 1)..n {
            heap.push(Candidate {
                sim: linkage_value(&link, &size, i, j),
                i,
                j,
                version_i: 0,
                version_j: 0,
            });
        }
    }

    let mut remaining = n;
    while remaining > cfg.k {
        let cand = heap.pop().ok_or_else(|| Error::Clustering("heap exhausted".into()))?;
        let Candidate { i, j, version_i, version_j, .. } = cand;
        if !active[i] || !active[j] || version[i] != version_i || version[j] != version_j {
            continue; // stale entry
        }
        // merge j into i (i < j)
        for t in 0..n {
            if t == i || t == j || !active[t] {
                continue;
            }
            let merged = match cfg.linkage {
                Linkage::Average => link[i * n + t] + link[j * n + t],
                Linkage::Single => link[i * n + t].max(link[j * n + t]),
                Linkage::Complete => link[i * n + t].min(link[j * n + t]),
            };
            link[i * n + t] = merged;
            link[t * n + i] = merged;
        }
        size[i] += size[j];
        active[j] = false;
        parent[j] = i;
        version[i] += 1;
        remaining -= 1;
        for t in 0..n {
            if t == i || !active[t] {
                continue;
            }
            let (a, b) = if t < i { (t, i) } else { (i, t) };
            heap.push(Candidate {
                sim: linkage_value(&link, &size, a, b),
                i: a,
                j: b,
                version_i: version[a],
                version_j: version[b],
            });
        }
    }

    // Resolve roots and renumber by lowest member id (= slot id order).
    let mut root = vec![0usize; n];
    for i in 0..n {
        let mut r = i;
        while parent[r] != r {
            r = parent[r];
        }
        root[i] = r;
    }
    let mut slots: Vec<usize> = (0..n).filter(|&i| active[i]).collect();
    slots.sort_unstable();
    let mut slot_label = vec![usize::MAX; n];
    for (label, &slot) in slots.iter().enumerate() {
        slot_label[slot] = label;
    }
    let labels: Vec<usize> = root.iter().map(|&r| slot_label[r]).collect();
    ClusterAssignment::new(labels, cfg.k)
}

/// Exhaustive reference agglomerator: each step recomputes every pairwise
/// linkage from the original matrix and member lists. Quadratic per step,
/// cubic overall; used as the oracle for the fast path.
pub fn agglomerate_reference(s: &SimilarityMatrix, cfg: &ClusterConfig) -> Result<ClusterAssignment> {
    let n = s.n;
    if cfg.k == 0 || cfg.k > n {
        return Err(Error::Clustering(format!("k={} out of range for n={n}", cfg.k)));
    }
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    while clusters.len() > cfg.k {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in (a + 1)..clusters.len() {
                let mut value = match cfg.linkage {
                    Linkage::Average => 0.0,
                    Linkage::Single => f64::NEG_INFINITY,
                    Linkage::Complete => f64::INFINITY,
                };
                for &x in &clusters[a] {
                    for &y in &clusters[b] {
                        let v = s.get(x, y);
                        match cfg.linkage {
                            Linkage::Average => value += v,
                            Linkage::Single => value = value.max(v),
                            Linkage::Complete => value = value.min(v),
                        }
                    }
                }
                if cfg.linkage == Linkage::Average {
                    value /= (clusters[a].len() * clusters[b].len()) as f64;
                }
                // clusters are kept sorted by lowest member, so (a, b) order
                // is the lexicographic tie-break
                let better = match &best {
                    None => true,
                    Some((bv, _, _)) => value > *bv,
                };
                if better {
                    best = Some((value, a, b));
                }
            }
        }
        let (_, a, b) = best.expect("at least one pair");
        let merged = clusters.remove(b);
        clusters[a].extend(merged);
        clusters[a].sort_unstable();
        clusters.sort_by_key(|c| c[0]);
    }
    let mut labels = vec![0usize; n];
    for (label, members) in clusters.iter().enumerate() {
        for &m in members {
            labels[m] = label;
        }
    }
    ClusterAssignment::new(labels, cfg.k)
}

/// External cluster quality: normalized mutual information and purity
/// against ground-truth labels.
pub fn cluster_quality(assign: &ClusterAssignment, truth: &[usize]) -> Result<(f64, f64)> {
    let n = assign.labels.len();
    if truth.len() != n {
        return Err(Error::Clustering("label length mismatch".into()));
    }
    if n == 0 {
        return Err(Error::Clustering("empty assignment".into()));
    }
    let k_a = assign.k;
    let k_t = truth.iter().max().map(|&m| m + 1).unwrap_or(0);
    let mut table = vec![0usize; k_a * k_t];
    let mut count_a = vec![0usize; k_a];
    let mut count_t = vec![0usize; k_t];
    for (&a, &t) in assign.labels.iter().zip(truth) {
        table[a * k_t + t] += 1;
        count_a[a] += 1;
        count_t[t] += 1;
    }
    let nf = n as f64;
    let entropy = |counts: &[usize]| -> f64 {
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / nf;
                -p * p.ln()
            })
            .sum()
    };
    let h_a = entropy(&count_a);
    let h_t = entropy(&count_t);
    let mut mi = 0.0;
    for a in 0..k_a {
        for t in 0..k_t {
            let c = table[a * k_t + t];
            if c > 0 {
                let p = c as f64 / nf;
                mi += p * (p * nf * nf / (count_a[a] * count_t[t]) as f64).ln();
            }
        }
    }
    let nmi = if h_a + h_t == 0.0 {
        1.0 // both partitions trivial, hence identical
    } else {
        (2.0 * mi / (h_a + h_t)).clamp(0.0, 1.0)
    };
    let purity = (0..k_a)
        .map(|a| (0..k_t).map(|t| table[a * k_t + t]).max().unwrap_or(0))
        .sum::<usize>() as f64
        / nf;
    Ok((nmi, purity))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::{Rng, SimKind};

    fn random_sim(rng: &mut Rng, n: usize) -> SimilarityMatrix {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            values[i * n + i] = 1.0;
            for j in (i + 1)..n {
                let v = rng.uniform();
                values[i * n + j] = v;
                values[j * n + i] = v;
            }
        }
        SimilarityMatrix { n, values, kind: SimKind::Cosine }
    }

    fn blob_sim(n_per: usize) -> SimilarityMatrix {
        // two blobs: high within-blob similarity, low across
        let n = 2 * n_per;
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                values[i * n + j] = if i == j {
                    1.0
                } else if (i < n_per) == (j < n_per) {
                    0.8 + 0.01 * ((i + j) % 5) as f64
                } else {
                    0.1 + 0.01 * ((i * j) % 3) as f64
                };
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                values[j * n + i] = values[i * n + j];
            }
        }
        SimilarityMatrix { n, values, kind: SimKind::Cosine }
    }

    #[test]
    fn k_equals_n_is_identity() {
        let mut rng = Rng::new(1);
        let s = random_sim(&mut rng, 6);
        let a = agglomerate(&s, &ClusterConfig { k: 6, linkage: Linkage::Average }).unwrap();
        assert_eq!(a.labels, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn k_one_is_single_cluster() {
        let mut rng = Rng::new(2);
        let s = random_sim(&mut rng, 5);
        let a = agglomerate(&s, &ClusterConfig { k: 1, linkage: Linkage::Average }).unwrap();
        assert!(a.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn two_blobs_recovered_and_match_reference() {
        let s = blob_sim(4);
        for linkage in [Linkage::Average, Linkage::Complete, Linkage::Single] {
            let cfg = ClusterConfig { k: 2, linkage };
            let a = agglomerate(&s, &cfg).unwrap();
            let r = agglomerate_reference(&s, &cfg).unwrap();
            assert_eq!(a.labels, r.labels, "{linkage:?}");
            assert_eq!(a.labels, vec![0, 0, 0, 0, 1, 1, 1, 1]);
        }
    }

    #[test]
    fn k_too_large_errors() {
        let mut rng = Rng::new(3);
        let s = random_sim(&mut rng, 4);
        assert!(agglomerate(&s, &ClusterConfig { k: 5, linkage: Linkage::Average }).is_err());
    }

    #[test]
    fn asymmetric_input_rejected() {
        let values = vec![1.0, 0.5, 0.9, 1.0];
        let s = SimilarityMatrix { n: 2, values, kind: SimKind::Cosine };
        assert!(agglomerate(&s, &ClusterConfig::default()).is_err());
    }

    #[test]
    fn matches_reference_on_random_instances() {
        let mut rng = Rng::new(4);
        for trial in 0..30 {
            let n = 5 + rng.gen_range(0, 20);
            let s = random_sim(&mut rng, n);
            let k = 1 + rng.gen_range(0, n);
            for linkage in [Linkage::Average, Linkage::Complete, Linkage::Single] {
                let cfg = ClusterConfig { k, linkage };
                let a = agglomerate(&s, &cfg).unwrap();
                let r = agglomerate_reference(&s, &cfg).unwrap();
                assert_eq!(a.labels, r.labels, "trial {trial}, n={n}, k={k}, {linkage:?}");
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let mut rng = Rng::new(5);
        let s = random_sim(&mut rng, 10);
        let cfg = ClusterConfig { k: 3, linkage: Linkage::Average };
        let a = agglomerate(&s, &cfg).unwrap();
        // permute samples
        let mut perm: Vec<usize> = (0..10).collect();
        rng.shuffle(&mut perm);
        let mut values = vec![0.0; 100];
        for i in 0..10 {
            for j in 0..10 {
                values[i * 10 + j] = s.get(perm[i], perm[j]);
            }
        }
        let sp = SimilarityMatrix { n: 10, values, kind: SimKind::Cosine };
        let b = agglomerate(&sp, &cfg).unwrap();
        // same partition: co-membership must agree
        for i in 0..10 {
            for j in 0..10 {
                assert_eq!(
                    a.labels[perm[i]] == a.labels[perm[j]],
                    b.labels[i] == b.labels[j]
                );
            }
        }
    }

    #[test]
    fn monotone_transform_invariance_single_complete() {
        let mut rng = Rng::new(6);
        let s = random_sim(&mut rng, 12);
        let transformed = SimilarityMatrix {
            n: 12,
            values: s.values.iter().map(|&v| (3.0 * v).exp()).collect(),
            kind: SimKind::Cosine,
        };
        for linkage in [Linkage::Single, Linkage::Complete] {
            let cfg = ClusterConfig { k: 4, linkage };
            assert_eq!(
                agglomerate(&s, &cfg).unwrap().labels,
                agglomerate(&transformed, &cfg).unwrap().labels,
                "{linkage:?}"
            );
        }
    }

    #[test]
    fn quality_perfect_match() {
        let a = ClusterAssignment::new(vec![0, 0, 1, 1, 2], 3).unwrap();
        let (nmi, purity) = cluster_quality(&a, &[5, 5, 2, 2, 0]).unwrap();
        assert!((nmi - 1.0).abs() < 1e-12);
        assert!((purity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quality_single_cluster_zero_nmi() {
        let a = ClusterAssignment::new(vec![0, 0, 0, 0], 1).unwrap();
        let (nmi, _) = cluster_quality(&a, &[0, 0, 1, 1]).unwrap();
        assert_eq!(nmi, 0.0);
    }

    #[test]
    fn quality_independent_labels() {
        // contingency table is uniform: zero mutual information, purity 1/2
        let a = ClusterAssignment::new(vec![0, 0, 1, 1], 2).unwrap();
        let (nmi, purity) = cluster_quality(&a, &[0, 1, 0, 1]).unwrap();
        assert!(nmi.abs() < 1e-12);
        assert!((purity - 0.5).abs() < 1e-12);
    }

    #[test]
    fn quality_length_mismatch() {
        let a = ClusterAssignment::new(vec![0, 1], 2).unwrap();
        assert!(cluster_quality(&a, &[0]).is_err());
    }
}
