//! The alternating two-stage training loop: intra-camera pseudo-label
//! training (per-camera clustering + per-camera classifier heads on a shared
//! backbone), then inter-camera pseudo-label training (score-vector Jaccard
//! similarity added to the feature similarity, global head, cross entropy
//! plus batch-hard triplet loss), repeated for a fixed number of rounds with
//! a decaying mu.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::{agglomerate, cluster_quality, ClusterConfig, Linkage};
use crate::core::{cosine_matrix, ClusterAssignment, Dataset, Embedding, Rng, SimilarityMatrix};
use crate::eval::{cmc_map, similarity_histogram, EvalOptions, Metrics, RetrievalProtocol};
use crate::nn::{
    batch_hard_triplet, classify_scores, encode_backward, encode_eval, encode_train,
    save_checkpoint, sgd_step, sgd_step_encoder, softmax_ce, AlphaSharing, ClassifierHead,
    EncoderGrads, EncoderModel, ParamGroup, SgdConfig, Tensor3,
};
use crate::similarity::{
    inter_camera_similarity, jaccard_matrix, k_reciprocal_rerank, BaseKind, InterSimConfig,
};
use crate::synthgen::{dataset_split_seed, make_query_gallery, split_by_camera};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub rounds: usize,
    pub epochs_intra: usize,
    pub epochs_inter: usize,
    pub k_intra_per_camera: usize,
    pub k_inter: usize,
    pub batch_intra: usize,
    /// Clusters per inter-stage batch.
    pub p: usize,
    /// Samples per cluster per inter-stage batch.
    pub k: usize,
    pub mu0: f64,
    pub mu_decay_power: f64,
    pub lambda_triplet: f64,
    pub margin: f64,
    pub sgd_intra: SgdConfig,
    pub sgd_inter: SgdConfig,
    pub linkage: Linkage,
    pub seed: u64,
    // encoder architecture
    pub mid_channels: usize,
    pub embed_dim: usize,
    pub alpha_init: f64,
    pub alpha_learnable: bool,
    pub alpha_sharing: AlphaSharing,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            rounds: 5,
            epochs_intra: 4,
            epochs_inter: 2,
            k_intra_per_camera: 56,
            k_inter: 72,
            batch_intra: 8,
            p: 8,
            k: 4,
            mu0: 0.02,
            mu_decay_power: 0.9,
            lambda_triplet: 0.5,
            margin: 0.3,
            sgd_intra: SgdConfig { lr_base: 0.005, lr_heads: 0.05, momentum: 0.9, weight_decay: 5e-4 },
            sgd_inter: SgdConfig { lr_base: 0.005, lr_heads: 0.1, momentum: 0.9, weight_decay: 5e-4 },
            linkage: Linkage::Average,
            seed: 1,
            mid_channels: 12,
            embed_dim: 16,
            alpha_init: 0.5,
            alpha_learnable: true,
            alpha_sharing: AlphaSharing::PerBlock,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        if self.rounds < 1 {
            return Err(Error::InvalidConfig("rounds must be >= 1".into()));
        }
        if self.k < 2 {
            return Err(Error::InvalidConfig("k (samples per cluster) must be >= 2".into()));
        }
        if self.p < 2 {
            return Err(Error::InvalidConfig("p (clusters per batch) must be >= 2".into()));
        }
        if self.k_inter < 2 {
            return Err(Error::InvalidConfig("k_inter must be >= 2".into()));
        }
        if self.k_inter > ds.len() {
            return Err(Error::InvalidConfig(format!(
                "k_inter={} exceeds dataset size {}",
                self.k_inter,
                ds.len()
            )));
        }
        if self.p > self.k_inter {
            return Err(Error::InvalidConfig("p exceeds k_inter".into()));
        }
        if self.batch_intra < 2 {
            return Err(Error::InvalidConfig("batch_intra must be >= 2".into()));
        }
        let min_camera = split_by_camera(ds).iter().map(|p| p.len()).min().unwrap_or(0);
        if self.k_intra_per_camera > min_camera {
            return Err(Error::InvalidConfig(format!(
                "k_intra_per_camera={} exceeds smallest camera size {min_camera}",
                self.k_intra_per_camera
            )));
        }
        self.sgd_intra.validate()?;
        self.sgd_inter.validate()?;
        Ok(())
    }
}

/// Which stages to run; mirrors the stage ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// Intra-camera stage only.
    Stage1Only,
    /// Inter-camera stage from scratch, feature similarity only.
    InterOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageQuality {
    pub camera: Option<usize>,
    pub k: usize,
    pub nmi: Option<f64>,
    pub purity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub mu: f64,
    pub intra_quality: Vec<StageQuality>,
    pub intra_losses: Vec<f64>,
    pub inter_quality: Option<StageQuality>,
    pub inter_losses: Vec<f64>,
    /// Mean normalized similarity gap (same-id cross-cam minus diff-id
    /// cross-cam) measured after each stage.
    pub sim_gap_after_intra: Option<f64>,
    pub sim_gap_after_inter: Option<f64>,
    pub metrics: Option<Metrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub ablation: Ablation,
    pub seed: u64,
    pub initial_sim_gap: f64,
    pub rounds: Vec<RoundReport>,
    pub final_metrics: Metrics,
    /// Elapsed training time in seconds. Excluded from equality so that
    /// determinism checks compare only the numerical results.
    #[serde(default)]
    pub wall_seconds: f64,
}

impl PartialEq for RunReport {
    fn eq(&self, other: &Self) -> bool {
        self.ablation == other.ablation
            && self.seed == other.seed
            && self.initial_sim_gap == other.initial_sim_gap
            && self.rounds == other.rounds
            && self.final_metrics == other.final_metrics
    }
}

/// mu_t = mu0 * (1 - t/R)^p, the poly decay.
pub fn mu_schedule(t: usize, cfg: &PipelineConfig) -> Result<f64> {
    if t >= cfg.rounds {
        return Err(Error::InvalidConfig(format!(
            "round {t} out of range for {} rounds",
            cfg.rounds
        )));
    }
    let frac = 1.0 - t as f64 / cfg.rounds as f64;
    Ok(cfg.mu0 * frac.powf(cfg.mu_decay_power))
}

fn batch_tensor(ds: &Dataset, ids: &[usize]) -> Tensor3 {
    let mut t = Tensor3::zeros(ids.len(), ds.channels, ds.length);
    for (row, &id) in ids.iter().enumerate() {
        let at = row * ds.channels * ds.length;
        t.data[at..at + ds.channels * ds.length].copy_from_slice(&ds.samples[id].signal);
    }
    t
}

/// Eval-mode embeddings for `ids`, computed on a frozen snapshot.
pub fn extract_embeddings(model: &EncoderModel, ds: &Dataset, ids: &[usize]) -> Result<Vec<Embedding>> {
    let x = batch_tensor(ds, ids);
    let f = encode_eval(model, &x)?;
    let d = model.d;
    Ok(ids
        .iter()
        .enumerate()
        .map(|(row, &id)| Embedding { sample_id: id, vector: f[row * d..(row + 1) * d].to_vec() })
        .collect())
}

/// Cosine or re-ranked base similarity, with k1 scaled down for tiny sets.
pub fn base_similarity(embeddings: &[Embedding], sim_cfg: &InterSimConfig) -> Result<SimilarityMatrix> {
    match sim_cfg.base_kind {
        BaseKind::Cosine => cosine_matrix(embeddings),
        BaseKind::Reranked => {
            let n = embeddings.len();
            let k1 = sim_cfg.rerank_k1.min(n / 3);
            if k1 <= sim_cfg.rerank_k2 {
                return cosine_matrix(embeddings); // too small to re-rank
            }
            k_reciprocal_rerank(embeddings, k1, sim_cfg.rerank_k2, sim_cfg.rerank_lambda)
        }
    }
}

/// Similarity gap used for the distribution diagnostics: mean normalized
/// cosine similarity of same-id/cross-cam pairs minus diff-id/cross-cam.
pub fn similarity_gap(model: &EncoderModel, ds: &Dataset, bins: usize) -> Result<f64> {
    let ids: Vec<usize> = (0..ds.len()).collect();
    let embeddings = extract_embeddings(model, ds, &ids)?;
    let sim = cosine_matrix(&embeddings)?;
    let identities = ds
        .identities()
        .ok_or_else(|| Error::InvalidDataset("similarity gap needs identities".into()))?;
    let hist = similarity_histogram(&sim, &identities, &ds.cameras(), bins)?;
    match (hist.means[1], hist.means[3]) {
        (Some(same), Some(diff)) => Ok(same - diff),
        _ => Err(Error::Eval("cross-camera populations are empty".into())),
    }
}

struct HeadOpt {
    vel_w: Vec<f64>,
    vel_b: Vec<f64>,
}

impl HeadOpt {
    fn new(head: &ClassifierHead) -> Self {
        HeadOpt { vel_w: vec![0.0; head.weights.len()], vel_b: vec![0.0; head.bias.len()] }
    }
}

/// Mean cross-entropy over a batch, mutating the encoder (train-mode forward)
/// and applying one SGD step to the backbone and the head.
fn train_ce_batch(
    model: &mut EncoderModel,
    vel: &mut EncoderGrads,
    head: &mut ClassifierHead,
    head_opt: &mut HeadOpt,
    ds: &Dataset,
    batch_ids: &[usize],
    labels: &[usize],
    sgd: &SgdConfig,
) -> Result<f64> {
    let n = batch_ids.len();
    let x = batch_tensor(ds, batch_ids);
    let (f, cache) = encode_train(model, &x)?;
    let d = model.d;
    let mut loss_sum = 0.0;
    let mut grad_f = vec![0.0; n * d];
    let mut grad_w = vec![0.0; head.weights.len()];
    let mut grad_b = vec![0.0; head.bias.len()];
    for (row, &label) in labels.iter().enumerate() {
        let (loss, grads) = softmax_ce(head, &f[row * d..(row + 1) * d], label)?;
        loss_sum += loss;
        let scale = 1.0 / n as f64;
        for (g, v) in grad_w.iter_mut().zip(&grads.weights) {
            *g += scale * v;
        }
        for (g, v) in grad_b.iter_mut().zip(&grads.bias) {
            *g += scale * v;
        }
        for (g, v) in grad_f[row * d..(row + 1) * d].iter_mut().zip(&grads.embedding) {
            *g = scale * v;
        }
    }
    let enc_grads = encode_backward(model, &cache, &grad_f)?;
    sgd_step_encoder(model, &enc_grads, vel, sgd)?;
    sgd_step(&mut head.weights, &grad_w, &mut head_opt.vel_w, sgd, ParamGroup::Head)?;
    sgd_step(&mut head.bias, &grad_b, &mut head_opt.vel_b, sgd, ParamGroup::Head)?;
    Ok(loss_sum / n as f64)
}

pub struct IntraOutcome {
    pub heads: Vec<ClassifierHead>,
    pub assignments: Vec<ClusterAssignment>,
    pub quality: Vec<StageQuality>,
    pub epoch_losses: Vec<f64>,
}

/// Intra-camera stage: cluster each camera's samples with the current
/// encoder, build one fresh head per camera, and train head + backbone with
/// camera batches interleaved round-robin.
pub fn intra_stage(
    model: &mut EncoderModel,
    ds: &Dataset,
    cfg: &PipelineConfig,
    sim_cfg: &InterSimConfig,
    rng: &mut Rng,
) -> Result<IntraOutcome> {
    let parts = split_by_camera(ds);
    let identities = ds.identities();

    // Pseudo-labels per camera from a frozen snapshot.
    let mut assignments = Vec::with_capacity(parts.len());
    let mut quality = Vec::with_capacity(parts.len());
    for (c, part) in parts.iter().enumerate() {
        let embeddings = extract_embeddings(model, ds, part)?;
        let sim = base_similarity(&embeddings, sim_cfg)?;
        let assign = agglomerate(
            &sim,
            &ClusterConfig { k: cfg.k_intra_per_camera, linkage: cfg.linkage },
        )?;
        let (nmi, purity) = match &identities {
            Some(ids) => {
                let truth: Vec<usize> = part.iter().map(|&i| ids[i]).collect();
                let (n, p) = cluster_quality(&assign, &truth)?;
                (Some(n), Some(p))
            }
            None => (None, None),
        };
        quality.push(StageQuality { camera: Some(c), k: assign.k, nmi, purity });
        assignments.push(assign);
    }

    let mut heads: Vec<ClassifierHead> = assignments
        .iter()
        .enumerate()
        .map(|(c, a)| ClassifierHead::new(a.k, model.d, Some(crate::core::CameraId(c)), rng))
        .collect();
    let mut head_opts: Vec<HeadOpt> = heads.iter().map(HeadOpt::new).collect();
    let mut vel = EncoderGrads::zeros_like(model);

    let mut epoch_losses = Vec::with_capacity(cfg.epochs_intra);
    for _epoch in 0..cfg.epochs_intra {
        // Per-camera batch lists for this epoch, padded by wrapping so every
        // batch is full (BN statistics need a fixed minimum size).
        let mut batches: Vec<Vec<(Vec<usize>, Vec<usize>)>> = Vec::new();
        for (c, part) in parts.iter().enumerate() {
            let mut order: Vec<usize> = (0..part.len()).collect();
            rng.shuffle(&mut order);
            let mut cam_batches = Vec::new();
            let mut at = 0;
            while at < order.len() {
                let mut ids = Vec::with_capacity(cfg.batch_intra);
                let mut labels = Vec::with_capacity(cfg.batch_intra);
                for b in 0..cfg.batch_intra {
                    let pos = order[(at + b) % order.len()];
                    ids.push(part[pos]);
                    labels.push(assignments[c].labels[pos]);
                }
                cam_batches.push((ids, labels));
                at += cfg.batch_intra;
            }
            batches.push(cam_batches);
        }
        let max_batches = batches.iter().map(|b| b.len()).max().unwrap_or(0);
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        for step in 0..max_batches {
            for c in 0..parts.len() {
                if let Some((ids, labels)) = batches[c].get(step) {
                    let loss = train_ce_batch(
                        model,
                        &mut vel,
                        &mut heads[c],
                        &mut head_opts[c],
                        ds,
                        ids,
                        labels,
                        &cfg.sgd_intra,
                    )?;
                    loss_sum += loss;
                    loss_n += 1;
                }
            }
        }
        epoch_losses.push(if loss_n > 0 { loss_sum / loss_n as f64 } else { 0.0 });
    }

    Ok(IntraOutcome { heads, assignments, quality, epoch_losses })
}

pub struct InterOutcome {
    pub assignment: ClusterAssignment,
    pub quality: StageQuality,
    pub epoch_losses: Vec<f64>,
}

/// Inter-camera stage: cluster all samples using the mu-boosted similarity
/// built from the intra-stage heads' score vectors, then train a fresh
/// global head with cross entropy plus batch-hard triplet loss over
/// P×K-sampled batches.
pub fn inter_stage(
    model: &mut EncoderModel,
    ds: &Dataset,
    camera_heads: &[ClassifierHead],
    cfg: &PipelineConfig,
    sim_cfg: &InterSimConfig,
    mu_t: f64,
    rng: &mut Rng,
) -> Result<InterOutcome> {
    if cfg.k_inter < 2 {
        return Err(Error::InvalidConfig("k_inter must be >= 2".into()));
    }
    let all_ids: Vec<usize> = (0..ds.len()).collect();
    let embeddings = extract_embeddings(model, ds, &all_ids)?;
    let base = base_similarity(&embeddings, sim_cfg)?;

    let sim = if camera_heads.is_empty() {
        // No intra-stage classifiers available: feature similarity only.
        SimilarityMatrix { n: base.n, values: base.values.clone(), kind: base.kind }
    } else {
        let scores: Vec<_> = embeddings
            .iter()
            .map(|e| classify_scores(camera_heads, &e.vector))
            .collect::<Result<_>>()?;
        let mut delta = jaccard_matrix(&scores)?;
        if sim_cfg.delta_cross_camera_only {
            let cams = ds.cameras();
            let n = ds.len();
            for i in 0..n {
                for j in 0..n {
                    if cams[i] == cams[j] {
                        delta[i * n + j] = 0.0;
                    }
                }
            }
        }
        inter_camera_similarity(&base, &delta, mu_t)?
    };

    let assignment =
        agglomerate(&sim, &ClusterConfig { k: cfg.k_inter, linkage: cfg.linkage })?;
    let quality = match ds.identities() {
        Some(truth) => {
            let (nmi, purity) = cluster_quality(&assignment, &truth)?;
            StageQuality { camera: None, k: assignment.k, nmi: Some(nmi), purity: Some(purity) }
        }
        None => StageQuality { camera: None, k: assignment.k, nmi: None, purity: None },
    };

    let members = assignment.members();
    if members.iter().filter(|m| !m.is_empty()).count() < cfg.p {
        return Err(Error::InvalidConfig("fewer clusters than p".into()));
    }

    let mut head = ClassifierHead::new(cfg.k_inter, model.d, None, rng);
    let mut head_opt = HeadOpt::new(&head);
    let mut vel = EncoderGrads::zeros_like(model);
    let d = model.d;

    let mut epoch_losses = Vec::with_capacity(cfg.epochs_inter);
    for _epoch in 0..cfg.epochs_inter {
        let mut cluster_order: Vec<usize> = (0..cfg.k_inter).collect();
        rng.shuffle(&mut cluster_order);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut at = 0;
        while at < cluster_order.len() {
            // P distinct clusters; the last group wraps around the shuffled
            // order so every batch has exactly P labels.
            let mut group = Vec::with_capacity(cfg.p);
            let mut idx = at;
            while group.len() < cfg.p {
                let c = cluster_order[idx % cluster_order.len()];
                if !group.contains(&c) {
                    group.push(c);
                }
                idx += 1;
            }
            at += cfg.p;

            let mut batch_ids = Vec::with_capacity(cfg.p * cfg.k);
            let mut labels = Vec::with_capacity(cfg.p * cfg.k);
            for &c in &group {
                let mem = &members[c];
                if mem.len() >= cfg.k {
                    let picks = rng.sample_indices(mem.len(), cfg.k);
                    for p in picks {
                        batch_ids.push(mem[p]);
                        labels.push(c);
                    }
                } else {
                    // small cluster: sample with replacement
                    for _ in 0..cfg.k {
                        batch_ids.push(mem[rng.gen_range(0, mem.len())]);
                        labels.push(c);
                    }
                }
            }

            let n = batch_ids.len();
            let x = batch_tensor(ds, &batch_ids);
            let (f, cache) = encode_train(model, &x)?;
            let mut grad_f = vec![0.0; n * d];
            let mut grad_w = vec![0.0; head.weights.len()];
            let mut grad_b = vec![0.0; head.bias.len()];
            let mut ce_sum = 0.0;
            for (row, &label) in labels.iter().enumerate() {
                let (loss, grads) = softmax_ce(&head, &f[row * d..(row + 1) * d], label)?;
                ce_sum += loss;
                let scale = 1.0 / n as f64;
                for (g, v) in grad_w.iter_mut().zip(&grads.weights) {
                    *g += scale * v;
                }
                for (g, v) in grad_b.iter_mut().zip(&grads.bias) {
                    *g += scale * v;
                }
                for (g, v) in grad_f[row * d..(row + 1) * d].iter_mut().zip(&grads.embedding) {
                    *g = scale * v;
                }
            }
            let (tri_loss, tri_grad) = batch_hard_triplet(&f, n, d, &labels, cfg.margin)?;
            for (g, t) in grad_f.iter_mut().zip(&tri_grad) {
                *g += cfg.lambda_triplet * t;
            }
            let enc_grads = encode_backward(model, &cache, &grad_f)?;
            sgd_step_encoder(model, &enc_grads, &mut vel, &cfg.sgd_inter)?;
            sgd_step(&mut head.weights, &grad_w, &mut head_opt.vel_w, &cfg.sgd_inter, ParamGroup::Head)?;
            sgd_step(&mut head.bias, &grad_b, &mut head_opt.vel_b, &cfg.sgd_inter, ParamGroup::Head)?;
            loss_sum += ce_sum / n as f64 + cfg.lambda_triplet * tri_loss;
            batches += 1;
        }
        epoch_losses.push(if batches > 0 { loss_sum / batches as f64 } else { 0.0 });
    }

    Ok(InterOutcome { assignment, quality, epoch_losses })
}

pub fn evaluate_model(
    model: &EncoderModel,
    ds: &Dataset,
    eval_opts: &EvalOptions,
) -> Result<Metrics> {
    let mut split_rng = Rng::new(dataset_split_seed(ds));
    let (query, gallery) = make_query_gallery(ds, &mut split_rng, eval_opts.query_fraction)?;
    let q_emb = extract_embeddings(model, ds, &query)?;
    let g_emb = extract_embeddings(model, ds, &gallery)?;
    let q_unit: Vec<Vec<f64>> = q_emb
        .iter()
        .map(|e| crate::core::l2_normalize(&e.vector))
        .collect::<Result<_>>()?;
    let g_unit: Vec<Vec<f64>> = g_emb
        .iter()
        .map(|e| crate::core::l2_normalize(&e.vector))
        .collect::<Result<_>>()?;
    let mut sim = vec![0.0; query.len() * gallery.len()];
    for (qi, q) in q_unit.iter().enumerate() {
        for (gi, g) in g_unit.iter().enumerate() {
            sim[qi * gallery.len() + gi] = q.iter().zip(g).map(|(a, b)| a * b).sum();
        }
    }
    let protocol = RetrievalProtocol { query, gallery };
    let result = cmc_map(&sim, &protocol, &ds.identities().unwrap(), &ds.cameras())?;
    Ok(Metrics::from(&result))
}

/// Build the encoder for a dataset: the full architecture for signal data,
/// neck-only for imported embeddings (length-1 signals).
pub fn init_model(ds: &Dataset, cfg: &PipelineConfig, rng: &mut Rng) -> EncoderModel {
    if ds.length == 1 {
        EncoderModel::neck_only(ds.channels)
    } else {
        EncoderModel::new(
            ds.channels,
            cfg.mid_channels,
            ds.length,
            cfg.embed_dim,
            cfg.alpha_sharing,
            cfg.alpha_init,
            rng,
        )
    }
}

/// Run the full alternating loop. Per-round artifacts (checkpoint and
/// round report) are written under `out_dir` when given.
pub fn run(
    cfg: &PipelineConfig,
    sim_cfg: &InterSimConfig,
    eval_opts: &EvalOptions,
    ds: &Dataset,
    ablation: Ablation,
    out_dir: Option<&Path>,
) -> Result<(EncoderModel, RunReport)> {
    cfg.validate(ds)?;
    let started = std::time::Instant::now();
    let mut rng = Rng::new(cfg.seed);
    let mut model = init_model(ds, cfg, &mut rng);
    model.aibn.alpha_learnable = cfg.alpha_learnable;
    let model = &mut model;

    let has_truth = ds.identities().is_some();
    let initial_sim_gap = if has_truth { similarity_gap(model, ds, eval_opts.bins)? } else { 0.0 };

    let mut rounds = Vec::with_capacity(cfg.rounds);
    for t in 0..cfg.rounds {
        let mu = mu_schedule(t, cfg)?;
        let with_context = |err: Error, stage: &str| -> Error {
            match err {
                Error::Diverged(msg) => {
                    Error::Diverged(format!("round {t}, {stage} stage: {msg}"))
                }
                other => other,
            }
        };

        let (intra_quality, intra_losses, heads) = if ablation == Ablation::InterOnly {
            (Vec::new(), Vec::new(), Vec::new())
        } else {
            let out = intra_stage(model, ds, cfg, sim_cfg, &mut rng)
                .map_err(|e| with_context(e, "intra"))?;
            (out.quality, out.epoch_losses, out.heads)
        };
        let sim_gap_after_intra = if has_truth && ablation != Ablation::InterOnly {
            Some(similarity_gap(model, ds, eval_opts.bins)?)
        } else {
            None
        };

        let (inter_quality, inter_losses, sim_gap_after_inter) =
            if ablation == Ablation::Stage1Only {
                (None, Vec::new(), None)
            } else {
                let out = inter_stage(model, ds, &heads, cfg, sim_cfg, mu, &mut rng)
                    .map_err(|e| with_context(e, "inter"))?;
                let gap = if has_truth {
                    Some(similarity_gap(model, ds, eval_opts.bins)?)
                } else {
                    None
                };
                (Some(out.quality), out.epoch_losses, gap)
            };

        let metrics = if has_truth { Some(evaluate_model(model, ds, eval_opts)?) } else { None };
        let report = RoundReport {
            round: t,
            mu,
            intra_quality,
            intra_losses,
            inter_quality,
            inter_losses,
            sim_gap_after_intra,
            sim_gap_after_inter,
            metrics,
        };
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
            save_checkpoint(model, &dir.join(format!("round_{t}.ck")))?;
            let json = serde_json::to_string_pretty(&report)
                .map_err(|e| Error::Format(e.to_string()))?;
            std::fs::write(dir.join(format!("round_{t}.json")), json)?;
        }
        rounds.push(report);
    }

    let final_metrics = evaluate_model(model, ds, eval_opts)?;
    let report = RunReport {
        ablation,
        seed: cfg.seed,
        initial_sim_gap,
        rounds,
        final_metrics: final_metrics.clone(),
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out_dir {
        save_checkpoint(model, &dir.join("final.ck"))?;
        let json = serde_json::to_string_pretty(&final_metrics)
            .map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join("metrics.json"), json)?;
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join("run_report.json"), json)?;
    }
    Ok((model.clone(), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate, GenConfig};

    fn small_config() -> (GenConfig, PipelineConfig) {
        let gen = GenConfig {
            num_identities: 8,
            num_cameras: 2,
            samples_min: 3,
            samples_max: 3,
            channels: 4,
            length: 6,
            seed: 5,
            ..GenConfig::default()
        };
        let pipe = PipelineConfig {
            rounds: 1,
            epochs_intra: 1,
            epochs_inter: 1,
            k_intra_per_camera: 8,
            k_inter: 10,
            p: 4,
            k: 2,
            batch_intra: 4,
            mid_channels: 6,
            embed_dim: 8,
            seed: 3,
            ..PipelineConfig::default()
        };
        (gen, pipe)
    }

    #[test]
    fn mu_schedule_values() {
        let cfg = PipelineConfig { rounds: 40, mu0: 0.02, mu_decay_power: 0.9, ..PipelineConfig::default() };
        assert_eq!(mu_schedule(0, &cfg).unwrap(), 0.02);
        let mid = mu_schedule(20, &cfg).unwrap();
        assert!((mid - 0.02 * 0.5f64.powf(0.9)).abs() < 1e-12);
        assert!((mid - 0.010717).abs() < 1e-5);
        assert!(mu_schedule(40, &cfg).is_err());
        let flat = PipelineConfig { mu_decay_power: 0.0, ..cfg };
        for t in 0..40 {
            assert_eq!(mu_schedule(t, &flat).unwrap(), 0.02);
        }
    }

    #[test]
    fn mu_schedule_non_increasing() {
        let cfg = PipelineConfig { rounds: 10, ..PipelineConfig::default() };
        let mut prev = f64::INFINITY;
        for t in 0..10 {
            let mu = mu_schedule(t, &cfg).unwrap();
            assert!(mu <= prev);
            prev = mu;
        }
    }

    #[test]
    fn noise_free_clustering_is_pure_before_training() {
        let gen = GenConfig {
            num_identities: 6,
            num_cameras: 2,
            samples_min: 3,
            samples_max: 3,
            camera_offset_scale: 0.0,
            noise_scale: 0.0,
            gain_lo: 1.0,
            gain_hi: 1.0,
            channels: 4,
            length: 6,
            seed: 2,
            ..GenConfig::default()
        };
        let ds = generate(&gen).unwrap();
        let cfg = PipelineConfig {
            k_intra_per_camera: 6,
            epochs_intra: 0,
            mid_channels: 6,
            embed_dim: 8,
            seed: 7,
            ..PipelineConfig::default()
        };
        let mut rng = Rng::new(cfg.seed);
        let mut model = init_model(&ds, &cfg, &mut rng);
        let out =
            intra_stage(&mut model, &ds, &cfg, &InterSimConfig::default(), &mut rng).unwrap();
        for q in &out.quality {
            assert_eq!(q.purity, Some(1.0), "camera {:?}", q.camera);
        }
    }

    #[test]
    fn zero_epochs_leaves_model_unchanged() {
        let (gen, mut pipe) = small_config();
        pipe.epochs_intra = 0;
        let ds = generate(&gen).unwrap();
        let mut rng = Rng::new(pipe.seed);
        let mut model = init_model(&ds, &pipe, &mut rng);
        let before = model.clone();
        let out =
            intra_stage(&mut model, &ds, &pipe, &InterSimConfig::default(), &mut rng).unwrap();
        assert_eq!(model.flatten_params(), before.flatten_params());
        assert_eq!(out.assignments.len(), 2);
    }

    #[test]
    fn run_is_deterministic() {
        let (gen, pipe) = small_config();
        let ds = generate(&gen).unwrap();
        let sim_cfg = InterSimConfig::default();
        let eval_opts = EvalOptions::default();
        let (_, a) = run(&pipe, &sim_cfg, &eval_opts, &ds, Ablation::Full, None).unwrap();
        let (_, b) = run(&pipe, &sim_cfg, &eval_opts, &ds, Ablation::Full, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn inter_only_runs_without_heads() {
        let (gen, pipe) = small_config();
        let ds = generate(&gen).unwrap();
        let (_, report) = run(
            &pipe,
            &InterSimConfig::default(),
            &EvalOptions::default(),
            &ds,
            Ablation::InterOnly,
            None,
        )
        .unwrap();
        assert!(report.rounds[0].intra_quality.is_empty());
        assert!(report.rounds[0].inter_quality.is_some());
    }

    #[test]
    fn singleton_clusters_sample_with_replacement() {
        // k_inter = n forces singleton clusters; P*K batches must still form.
        let gen = GenConfig {
            num_identities: 4,
            num_cameras: 2,
            samples_min: 2,
            samples_max: 2,
            channels: 4,
            length: 6,
            seed: 8,
            ..GenConfig::default()
        };
        let ds = generate(&gen).unwrap();
        let cfg = PipelineConfig {
            rounds: 1,
            epochs_intra: 1,
            epochs_inter: 1,
            k_intra_per_camera: 4,
            k_inter: ds.len(),
            p: 2,
            k: 2,
            batch_intra: 4,
            mid_channels: 6,
            embed_dim: 8,
            seed: 9,
            ..PipelineConfig::default()
        };
        let (_, report) = run(
            &cfg,
            &InterSimConfig::default(),
            &EvalOptions::default(),
            &ds,
            Ablation::Full,
            None,
        )
        .unwrap();
        assert_eq!(report.rounds.len(), 1);
    }

    #[test]
    fn stage1_only_skips_inter() {
        let (gen, pipe) = small_config();
        let ds = generate(&gen).unwrap();
        let (_, report) = run(
            &pipe,
            &InterSimConfig::default(),
            &EvalOptions::default(),
            &ds,
            Ablation::Stage1Only,
            None,
        )
        .unwrap();
        assert!(report.rounds[0].inter_quality.is_none());
        assert!(report.rounds[0].sim_gap_after_inter.is_none());
    }

    #[test]
    fn validate_rejects_oversized_k_intra() {
        let (gen, mut pipe) = small_config();
        let ds = generate(&gen).unwrap();
        pipe.k_intra_per_camera = 1000;
        assert!(pipe.validate(&ds).is_err());
    }
}
