//! Retrieval evaluation (CMC, mAP), similarity-distribution histograms, and
//! a deterministic 2-D PCA export.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::core::{Embedding, SimilarityMatrix};
use crate::{Error, Result};

/// Evaluation settings carried in the run config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub query_fraction: f64,
    pub bins: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { query_fraction: 0.3, bins: 20 }
    }
}

/// Query/gallery index sets. Gallery items sharing both identity and camera
/// with a query are dropped from that query's ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalProtocol {
    pub query: Vec<usize>,
    pub gallery: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    /// cmc[k] = fraction of evaluated queries with a positive in the top k+1.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub num_queries: usize,
    pub excluded_queries: usize,
}

impl RetrievalResult {
    pub fn rank(&self, k: usize) -> f64 {
        let i = (k - 1).min(self.cmc.len().saturating_sub(1));
        self.cmc.get(i).copied().unwrap_or(0.0)
    }
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub num_queries: usize,
    pub excluded_queries: usize,
}

impl From<&RetrievalResult> for Metrics {
    fn from(r: &RetrievalResult) -> Self {
        Metrics {
            rank1: r.rank(1),
            rank5: r.rank(5),
            rank10: r.rank(10),
            map: r.map,
            num_queries: r.num_queries,
            excluded_queries: r.excluded_queries,
        }
    }
}

/// CMC and mAP from a query×gallery similarity matrix (row-major,
/// |query|×|gallery|). `identities` and `cameras` are indexed by global
/// sample id. Ties in similarity rank the lower gallery id first.
pub fn cmc_map(
    sim_qg: &[f64],
    protocol: &RetrievalProtocol,
    identities: &[usize],
    cameras: &[usize],
) -> Result<RetrievalResult> {
    let nq = protocol.query.len();
    let ng = protocol.gallery.len();
    if sim_qg.len() != nq * ng {
        return Err(Error::Eval(format!(
            "similarity is {} values, expected {nq}x{ng}",
            sim_qg.len()
        )));
    }
    for &i in protocol.query.iter().chain(&protocol.gallery) {
        if i >= identities.len() || i >= cameras.len() {
            return Err(Error::Eval(format!("sample id {i} out of range")));
        }
    }
    if protocol.query.iter().any(|q| protocol.gallery.contains(q)) {
        return Err(Error::Eval("query and gallery overlap".into()));
    }

    let mut cmc_acc = vec![0.0f64; ng.max(1)];
    let mut ap_sum = 0.0;
    let mut evaluated = 0usize;
    let mut excluded = 0usize;

    for (qi, &q) in protocol.query.iter().enumerate() {
        // Filter the gallery under the standard exclusion rule, then rank.
        let mut order: Vec<(usize, usize)> = protocol
            .gallery
            .iter()
            .enumerate()
            .filter(|&(_, &g)| !(identities[g] == identities[q] && cameras[g] == cameras[q]))
            .map(|(gi, &g)| (gi, g))
            .collect();
        order.sort_by(|&(ai, a), &(bi, b)| {
            let sa = sim_qg[qi * ng + ai];
            let sb = sim_qg[qi * ng + bi];
            sb.partial_cmp(&sa).expect("finite similarity").then(a.cmp(&b))
        });
        let positives: Vec<bool> =
            order.iter().map(|&(_, g)| identities[g] == identities[q]).collect();
        let total_pos = positives.iter().filter(|&&p| p).count();
        if total_pos == 0 {
            excluded += 1;
            continue;
        }
        evaluated += 1;
        let first_hit = positives.iter().position(|&p| p).expect("has a positive");
        for entry in cmc_acc.iter_mut().skip(first_hit) {
            *entry += 1.0;
        }
        // AP: precision at each positive's rank, averaged over positives.
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank, &pos) in positives.iter().enumerate() {
            if pos {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
            }
        }
        ap_sum += ap / total_pos as f64;
    }

    if evaluated == 0 {
        return Err(Error::Eval("no query has a valid positive".into()));
    }
    let cmc: Vec<f64> = cmc_acc.iter().map(|&c| c / evaluated as f64).collect();
    Ok(RetrievalResult {
        cmc,
        map: ap_sum / evaluated as f64,
        num_queries: evaluated,
        excluded_queries: excluded,
    })
}

pub const POPULATION_NAMES: [&str; 4] = [
    "same_id_same_cam",
    "same_id_cross_cam",
    "diff_id_same_cam",
    "diff_id_cross_cam",
];

/// Binned distributions of pairwise similarity, split into the four
/// identity/camera populations. Similarities are min-max normalized into
/// [0, 1] over all off-diagonal entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityHistogram {
    pub bin_edges: Vec<f64>,
    /// counts[p][b] for population p, bin b.
    pub counts: Vec<Vec<usize>>,
    /// Mean normalized similarity per population; None for empty populations.
    pub means: Vec<Option<f64>>,
}

pub fn similarity_histogram(
    s: &SimilarityMatrix,
    identities: &[usize],
    cameras: &[usize],
    bins: usize,
) -> Result<SimilarityHistogram> {
    let n = s.n;
    if identities.len() != n || cameras.len() != n {
        return Err(Error::Eval("label vectors must match similarity size".into()));
    }
    if bins == 0 {
        return Err(Error::Eval("bins must be positive".into()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                lo = lo.min(s.get(i, j));
                hi = hi.max(s.get(i, j));
            }
        }
    }
    let span = hi - lo;
    let normalize = |v: f64| -> f64 {
        if span > 0.0 {
            (v - lo) / span
        } else {
            0.0 // constant matrix: everything maps to 0
        }
    };
    let bin_edges: Vec<f64> = (0..=bins).map(|b| b as f64 / bins as f64).collect();
    let mut counts = vec![vec![0usize; bins]; 4];
    let mut sums = vec![0.0f64; 4];
    let mut pair_counts = vec![0usize; 4];
    for i in 0..n {
        for j in (i + 1)..n {
            let same_id = identities[i] == identities[j];
            let same_cam = cameras[i] == cameras[j];
            let pop = match (same_id, same_cam) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            };
            let v = normalize(s.get(i, j));
            let b = ((v * bins as f64) as usize).min(bins - 1);
            counts[pop][b] += 1;
            sums[pop] += v;
            pair_counts[pop] += 1;
        }
    }
    let means = sums
        .iter()
        .zip(&pair_counts)
        .map(|(&s, &c)| if c > 0 { Some(s / c as f64) } else { None })
        .collect();
    Ok(SimilarityHistogram { bin_edges, counts, means })
}

/// Histogram CSV: population, bin_lo, bin_hi, count.
pub fn write_histogram_csv(hist: &SimilarityHistogram, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "population,bin_lo,bin_hi,count")?;
    for (p, name) in POPULATION_NAMES.iter().enumerate() {
        for b in 0..hist.counts[p].len() {
            writeln!(
                w,
                "{name},{},{},{}",
                hist.bin_edges[b],
                hist.bin_edges[b + 1],
                hist.counts[p][b]
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Mean-centered projection onto the top-2 principal directions, with a
/// deterministic sign convention (largest-magnitude component positive).
pub fn pca2d(embeddings: &[Embedding]) -> Result<Vec<[f64; 2]>> {
    let n = embeddings.len();
    if n < 3 {
        return Err(Error::Eval("pca2d needs at least 3 points".into()));
    }
    let d = embeddings[0].vector.len();
    if d < 2 {
        return Err(Error::Eval("pca2d needs dimension >= 2".into()));
    }
    for e in embeddings {
        if e.vector.len() != d {
            return Err(Error::DimensionMismatch("pca2d embedding dims".into()));
        }
    }
    let mut mean = vec![0.0; d];
    for e in embeddings {
        for (m, &v) in mean.iter_mut().zip(&e.vector) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = nalgebra::DMatrix::<f64>::zeros(d, d);
    for e in embeddings {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (e.vector[i] - mean[i]) * (e.vector[j] - mean[j]);
            }
        }
    }
    cov /= n as f64;
    let eig = nalgebra::SymmetricEigen::new(cov);
    // top-2 eigenvectors by eigenvalue
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut axes = Vec::with_capacity(2);
    for &idx in order.iter().take(2) {
        let mut axis: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        // sign convention
        let (max_i, _) = axis
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
            .unwrap();
        if axis[max_i] < 0.0 {
            for v in axis.iter_mut() {
                *v = -*v;
            }
        }
        axes.push(axis);
    }
    Ok(embeddings
        .iter()
        .map(|e| {
            let centered: Vec<f64> = e.vector.iter().zip(&mean).map(|(v, m)| v - m).collect();
            [
                centered.iter().zip(&axes[0]).map(|(a, b)| a * b).sum(),
                centered.iter().zip(&axes[1]).map(|(a, b)| a * b).sum(),
            ]
        })
        .collect())
}
