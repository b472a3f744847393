//! Loss functions: softmax cross entropy on classifier heads, batch-hard
//! triplet loss on embeddings, and the concatenated per-camera score vector.

use crate::nn::{softmax, ClassifierHead};
use crate::similarity::ScoreVector;
use crate::{Error, Result};

/// Gradients of a single-sample cross-entropy loss.
pub struct CeGrads {
    /// [m][d]
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub embedding: Vec<f64>,
}

/// loss = -log softmax(W f + b)[label], with max-subtraction stabilization.
pub fn softmax_ce(head: &ClassifierHead, f: &[f64], label: usize) -> Result<(f64, CeGrads)> {
    if label >= head.m {
        return Err(Error::LabelOutOfRange { label, classes: head.m });
    }
    if f.len() != head.d {
        return Err(Error::DimensionMismatch(format!(
            "embedding dim {} vs head dim {}",
            f.len(),
            head.d
        )));
    }
    let logits = head.logits(f);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
    let loss = log_sum - logits[label];

    let probs = softmax(&logits);
    let mut gw = vec![0.0; head.m * head.d];
    let mut gb = vec![0.0; head.m];
    let mut gf = vec![0.0; head.d];
    for j in 0..head.m {
        let delta = probs[j] - if j == label { 1.0 } else { 0.0 };
        gb[j] = delta;
        for k in 0..head.d {
            gw[j * head.d + k] = delta * f[k];
            gf[k] += delta * head.weights[j * head.d + k];
        }
    }
    Ok((loss, CeGrads { weights: gw, bias: gb, embedding: gf }))
}

/// Concatenated softmax scores from the per-camera heads, ordered by camera
/// index. Each camera block is a valid distribution.
pub fn classify_scores(heads: &[ClassifierHead], f: &[f64]) -> Result<ScoreVector> {
    let mut values = Vec::new();
    let mut layout = Vec::new();
    for (c, head) in heads.iter().enumerate() {
        match head.camera {
            Some(cam) if cam.0 == c => {}
            _ => {
                return Err(Error::DimensionMismatch(format!(
                    "missing or misordered head for camera {c}"
                )))
            }
        }
        let probs = softmax(&head.logits(f));
        layout.push((c, probs.len()));
        values.extend(probs);
    }
    ScoreVector::new(values, layout)
}

/// Batch-hard triplet loss with Euclidean distances.
///
/// For each anchor, the hardest positive (max distance, same label) and the
/// hardest negative (min distance, different label) form the triplet; the
/// hinge subgradient is 0 at the kink and ties are broken by lowest index.
/// Returns the mean loss over anchors and dL/d(embeddings).
pub fn batch_hard_triplet(
    embeddings: &[f64],
    n: usize,
    d: usize,
    labels: &[usize],
    margin: f64,
) -> Result<(f64, Vec<f64>)> {
    if labels.len() != n || embeddings.len() != n * d {
        return Err(Error::DimensionMismatch("triplet batch shapes".into()));
    }
    // Every label needs >= 2 samples and at least one other label.
    for (i, &l) in labels.iter().enumerate() {
        let same = labels.iter().filter(|&&x| x == l).count();
        let diff = labels.iter().any(|&x| x != l);
        if same < 2 || !diff {
            let _ = i;
            return Err(Error::InvalidTripletBatch);
        }
    }

    let dist = |i: usize, j: usize| -> f64 {
        let a = &embeddings[i * d..(i + 1) * d];
        let b = &embeddings[j * d..(j + 1) * d];
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };

    let mut total = 0.0;
    let mut grad = vec![0.0; n * d];
    for i in 0..n {
        let mut hard_pos = usize::MAX;
        let mut d_ap = f64::NEG_INFINITY;
        let mut hard_neg = usize::MAX;
        let mut d_an = f64::INFINITY;
        for j in 0..n {
            if j == i {
                continue;
            }
            let dij = dist(i, j);
            if labels[j] == labels[i] {
                if dij > d_ap {
                    d_ap = dij;
                    hard_pos = j;
                }
            } else if dij < d_an {
                d_an = dij;
                hard_neg = j;
            }
        }
        let loss_i = margin + d_ap - d_an;
        if loss_i > 0.0 {
            total += loss_i;
            let scale = 1.0 / n as f64;
            // d(dist)/d(e_i) = (e_i - e_j)/dist; subgradient 0 at dist 0.
            if d_ap > 0.0 {
                for k in 0..d {
                    let g = scale * (embeddings[i * d + k] - embeddings[hard_pos * d + k]) / d_ap;
                    grad[i * d + k] += g;
                    grad[hard_pos * d + k] -= g;
                }
            }
            if d_an > 0.0 {
                for k in 0..d {
                    let g = scale * (embeddings[i * d + k] - embeddings[hard_neg * d + k]) / d_an;
                    grad[i * d + k] -= g;
                    grad[hard_neg * d + k] += g;
                }
            }
        }
    }
    Ok((total / n as f64, grad))
}
