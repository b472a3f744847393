//! Minimal differentiable encoder with AIBN, classifier heads, losses, SGD,
//! and a finite-difference gradient oracle. All arithmetic is f64; gradients
//! are exact analytic derivatives of the forward pass, verified against
//! central differences in the test suites.

mod aibn;
mod checkpoint;
mod gradcheck;
mod loss;

pub use aibn::{aibn_backward, aibn_forward, AibnCache, AibnGrads, AibnState, AlphaSharing, Mode};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{grad_check, GradCheckReport};
pub use loss::{batch_hard_triplet, classify_scores, softmax_ce, CeGrads};

use serde::{Deserialize, Serialize};

use crate::core::{CameraId, Rng};
use crate::{Error, Result};

/// Dense `[N, C, L]` tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub n: usize,
    pub c: usize,
    pub l: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(n: usize, c: usize, l: usize) -> Self {
        Tensor3 { n, c, l, data: vec![0.0; n * c * l] }
    }

    #[inline]
    pub fn get(&self, i: usize, c: usize, k: usize) -> f64 {
        self.data[(i * self.c + c) * self.l + k]
    }

    #[inline]
    pub fn set(&mut self, i: usize, c: usize, k: usize, v: f64) {
        self.data[(i * self.c + c) * self.l + k] = v;
    }

    #[inline]
    pub fn add(&mut self, i: usize, c: usize, k: usize, v: f64) {
        self.data[(i * self.c + c) * self.l + k] += v;
    }
}

/// BN-Neck analog: per-dimension standardization with a learnable scale and
/// no shift. Train mode uses batch statistics, eval mode running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct NeckState {
    pub scale: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl NeckState {
    pub fn new(d: usize) -> Self {
        NeckState {
            scale: vec![1.0; d],
            running_mean: vec![0.0; d],
            running_var: vec![1.0; d],
            epsilon: 1e-5,
            momentum: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NeckCache {
    pub xhat: Vec<f64>, // [n][d]
    pub istd: Vec<f64>, // [d]
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// mix -> AIBN -> ReLU -> flatten -> projection -> neck
    Full,
    /// Imported-embedding mode: the signal is already a feature vector and
    /// only the neck standardization is applied.
    NeckOnly,
}

/// Encoder parameters. `mix` is applied at every position of the signal,
/// followed by a single AIBN layer, ReLU, a flattening projection to the
/// embedding dimension, and the neck.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub arch: Arch,
    pub c_in: usize,
    pub c_mid: usize,
    pub length: usize,
    pub d: usize,
    /// [c_mid][c_in]
    pub mix: Vec<f64>,
    pub aibn: AibnState,
    /// [d][c_mid*length]
    pub proj: Vec<f64>,
    pub proj_bias: Vec<f64>,
    pub neck: NeckState,
}

impl EncoderModel {
    pub fn new(
        c_in: usize,
        c_mid: usize,
        length: usize,
        d: usize,
        sharing: AlphaSharing,
        alpha_init: f64,
        rng: &mut Rng,
    ) -> Self {
        let mix_std = 1.0 / (c_in as f64).sqrt();
        let proj_std = 1.0 / ((c_mid * length) as f64).sqrt();
        EncoderModel {
            arch: Arch::Full,
            c_in,
            c_mid,
            length,
            d,
            mix: (0..c_mid * c_in).map(|_| rng.normal() * mix_std).collect(),
            aibn: AibnState::new(c_mid, sharing, alpha_init),
            proj: (0..d * c_mid * length).map(|_| rng.normal() * proj_std).collect(),
            proj_bias: vec![0.0; d],
            neck: NeckState::new(d),
        }
    }

    /// Neck-only model over `dim`-dimensional imported embeddings.
    pub fn neck_only(dim: usize) -> Self {
        EncoderModel {
            arch: Arch::NeckOnly,
            c_in: dim,
            c_mid: 0,
            length: 1,
            d: dim,
            mix: Vec::new(),
            aibn: AibnState::new(0, AlphaSharing::PerBlock, 0.5),
            proj: Vec::new(),
            proj_bias: Vec::new(),
            neck: NeckState::new(dim),
        }
    }

    /// Flatten all trainable parameters in a fixed order. Running statistics
    /// are state, not parameters, and are excluded.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.mix);
        out.extend_from_slice(&self.aibn.gamma);
        out.extend_from_slice(&self.aibn.beta);
        out.extend_from_slice(&self.aibn.alpha);
        out.extend_from_slice(&self.proj);
        out.extend_from_slice(&self.proj_bias);
        out.extend_from_slice(&self.neck.scale);
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        let mut at = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&flat[at..at + dst.len()]);
            at += dst.len();
        };
        take(&mut self.mix);
        take(&mut self.aibn.gamma);
        take(&mut self.aibn.beta);
        take(&mut self.aibn.alpha);
        take(&mut self.proj);
        take(&mut self.proj_bias);
        take(&mut self.neck.scale);
        debug_assert_eq!(at, flat.len());
    }
}

/// Gradient (or momentum-velocity) buffers mirroring `EncoderModel`.
#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub mix: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub proj: Vec<f64>,
    pub proj_bias: Vec<f64>,
    pub neck_scale: Vec<f64>,
}

impl EncoderGrads {
    pub fn zeros_like(m: &EncoderModel) -> Self {
        EncoderGrads {
            mix: vec![0.0; m.mix.len()],
            gamma: vec![0.0; m.aibn.gamma.len()],
            beta: vec![0.0; m.aibn.beta.len()],
            alpha: vec![0.0; m.aibn.alpha.len()],
            proj: vec![0.0; m.proj.len()],
            proj_bias: vec![0.0; m.proj_bias.len()],
            neck_scale: vec![0.0; m.neck.scale.len()],
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.mix);
        out.extend_from_slice(&self.gamma);
        out.extend_from_slice(&self.beta);
        out.extend_from_slice(&self.alpha);
        out.extend_from_slice(&self.proj);
        out.extend_from_slice(&self.proj_bias);
        out.extend_from_slice(&self.neck_scale);
        out
    }
}

pub struct EncodeCache {
    pub x: Tensor3,
    pub aibn_cache: AibnCache,
    /// AIBN output (pre-ReLU), needed for the ReLU mask.
    pub aibn_out: Tensor3,
    /// [n][c_mid*length] post-ReLU flattened activations.
    pub flat: Vec<f64>,
    pub neck_cache: NeckCache,
    pub n: usize,
}

fn neck_forward_train(neck: &mut NeckState, f_pre: &[f64], n: usize) -> Result<(Vec<f64>, NeckCache)> {
    let d = neck.scale.len();
    if n < 2 {
        return Err(Error::BatchTooSmall);
    }
    let mut mu = vec![0.0; d];
    let mut var = vec![0.0; d];
    for i in 0..n {
        for k in 0..d {
            mu[k] += f_pre[i * d + k];
        }
    }
    for m in mu.iter_mut() {
        *m /= n as f64;
    }
    for i in 0..n {
        for k in 0..d {
            let dv = f_pre[i * d + k] - mu[k];
            var[k] += dv * dv;
        }
    }
    for v in var.iter_mut() {
        *v /= n as f64;
    }
    let istd: Vec<f64> = var.iter().map(|v| 1.0 / (v + neck.epsilon).sqrt()).collect();
    let mut xhat = vec![0.0; n * d];
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for k in 0..d {
            let xh = (f_pre[i * d + k] - mu[k]) * istd[k];
            xhat[i * d + k] = xh;
            out[i * d + k] = neck.scale[k] * xh;
        }
    }
    let m = neck.momentum;
    for k in 0..d {
        neck.running_mean[k] = (1.0 - m) * neck.running_mean[k] + m * mu[k];
        neck.running_var[k] = (1.0 - m) * neck.running_var[k] + m * var[k];
    }
    Ok((out, NeckCache { xhat, istd, n }))
}

fn neck_forward_eval(neck: &NeckState, f_pre: &[f64], n: usize) -> Vec<f64> {
    let d = neck.scale.len();
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        for k in 0..d {
            let istd = 1.0 / (neck.running_var[k] + neck.epsilon).sqrt();
            out[i * d + k] = neck.scale[k] * (f_pre[i * d + k] - neck.running_mean[k]) * istd;
        }
    }
    out
}

/// Standard batch-norm backward for the neck (scale, no shift).
fn neck_backward(
    neck: &NeckState,
    cache: &NeckCache,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let d = neck.scale.len();
    let n = cache.n;
    let mut grad_scale = vec![0.0; d];
    let mut sum_gh = vec![0.0; d];
    let mut sum_gh_xhat = vec![0.0; d];
    for i in 0..n {
        for k in 0..d {
            let gh = grad_out[i * d + k] * neck.scale[k];
            grad_scale[k] += grad_out[i * d + k] * cache.xhat[i * d + k];
            sum_gh[k] += gh;
            sum_gh_xhat[k] += gh * cache.xhat[i * d + k];
        }
    }
    let mut grad_in = vec![0.0; n * d];
    for i in 0..n {
        for k in 0..d {
            let gh = grad_out[i * d + k] * neck.scale[k];
            grad_in[i * d + k] = cache.istd[k] / n as f64
                * (n as f64 * gh - sum_gh[k] - cache.xhat[i * d + k] * sum_gh_xhat[k]);
        }
    }
    (grad_in, grad_scale)
}

/// Forward in train mode, caching intermediates for `encode_backward`.
/// Mutates running statistics.
pub fn encode_train(model: &mut EncoderModel, x: &Tensor3) -> Result<(Vec<f64>, EncodeCache)> {
    match model.arch {
        Arch::NeckOnly => {
            let n = x.n;
            let flat: Vec<f64> = x.data.clone();
            let (f, neck_cache) = neck_forward_train(&mut model.neck, &flat, n)?;
            Ok((
                f,
                EncodeCache {
                    x: x.clone(),
                    aibn_cache: AibnCache {
                        x: Tensor3::zeros(0, 0, 0),
                        mu_bn: Vec::new(),
                        var_bn: Vec::new(),
                        mu_in: Vec::new(),
                        var_in: Vec::new(),
                        denom: Vec::new(),
                        z: Tensor3::zeros(0, 0, 0),
                        a: Vec::new(),
                    },
                    aibn_out: Tensor3::zeros(0, 0, 0),
                    flat,
                    neck_cache,
                    n,
                },
            ))
        }
        Arch::Full => {
            let n = x.n;
            if x.c != model.c_in || x.l != model.length {
                return Err(Error::DimensionMismatch(format!(
                    "encode: input [{},{}] vs model [{},{}]",
                    x.c, x.l, model.c_in, model.length
                )));
            }
            let h_mix = mix_forward(model, x);
            let (aibn_out, cache) = aibn_forward(&h_mix, &mut model.aibn, Mode::Train)?;
            let aibn_cache = cache.expect("train mode caches");
            let flat = relu_flatten(&aibn_out);
            let f_pre = proj_forward(model, &flat, n);
            let (f, neck_cache) = neck_forward_train(&mut model.neck, &f_pre, n)?;
            Ok((f, EncodeCache { x: x.clone(), aibn_cache, aibn_out, flat, neck_cache, n }))
        }
    }
}

/// Deterministic eval-mode forward on a frozen model.
pub fn encode_eval(model: &EncoderModel, x: &Tensor3) -> Result<Vec<f64>> {
    match model.arch {
        Arch::NeckOnly => Ok(neck_forward_eval(&model.neck, &x.data, x.n)),
        Arch::Full => {
            if x.c != model.c_in || x.l != model.length {
                return Err(Error::DimensionMismatch(format!(
                    "encode: input [{},{}] vs model [{},{}]",
                    x.c, x.l, model.c_in, model.length
                )));
            }
            let h_mix = mix_forward(model, x);
            let mut aibn = model.aibn.clone();
            let (aibn_out, _) = aibn_forward(&h_mix, &mut aibn, Mode::Eval)?;
            let flat = relu_flatten(&aibn_out);
            let f_pre = proj_forward(model, &flat, x.n);
            Ok(neck_forward_eval(&model.neck, &f_pre, x.n))
        }
    }
}

fn mix_forward(model: &EncoderModel, x: &Tensor3) -> Tensor3 {
    let mut h = Tensor3::zeros(x.n, model.c_mid, model.length);
    for i in 0..x.n {
        for co in 0..model.c_mid {
            for k in 0..model.length {
                let mut acc = 0.0;
                for ci in 0..model.c_in {
                    acc += model.mix[co * model.c_in + ci] * x.get(i, ci, k);
                }
                h.set(i, co, k, acc);
            }
        }
    }
    h
}

fn relu_flatten(t: &Tensor3) -> Vec<f64> {
    t.data.iter().map(|&v| v.max(0.0)).collect()
}

fn proj_forward(model: &EncoderModel, flat: &[f64], n: usize) -> Vec<f64> {
    let fdim = model.c_mid * model.length;
    let mut out = vec![0.0; n * model.d];
    for i in 0..n {
        for k in 0..model.d {
            let mut acc = model.proj_bias[k];
            let row = &model.proj[k * fdim..(k + 1) * fdim];
            let xs = &flat[i * fdim..(i + 1) * fdim];
            for (w, v) in row.iter().zip(xs) {
                acc += w * v;
            }
            out[i * model.d + k] = acc;
        }
    }
    out
}

/// Backward through the full encoder given dL/d(embedding).
pub fn encode_backward(
    model: &EncoderModel,
    cache: &EncodeCache,
    grad_f: &[f64],
) -> Result<EncoderGrads> {
    let mut grads = EncoderGrads::zeros_like(model);
    let (grad_fpre, grad_scale) = neck_backward(&model.neck, &cache.neck_cache, grad_f);
    grads.neck_scale = grad_scale;
    if model.arch == Arch::NeckOnly {
        return Ok(grads);
    }

    let n = cache.n;
    let fdim = model.c_mid * model.length;
    // projection backward
    let mut grad_flat = vec![0.0; n * fdim];
    for i in 0..n {
        for k in 0..model.d {
            let g = grad_fpre[i * model.d + k];
            grads.proj_bias[k] += g;
            for j in 0..fdim {
                grads.proj[k * fdim + j] += g * cache.flat[i * fdim + j];
                grad_flat[i * fdim + j] += g * model.proj[k * fdim + j];
            }
        }
    }
    // ReLU backward
    let mut grad_aibn_out = Tensor3::zeros(n, model.c_mid, model.length);
    for (idx, g) in grad_flat.iter().enumerate() {
        if cache.aibn_out.data[idx] > 0.0 {
            grad_aibn_out.data[idx] = *g;
        }
    }
    let ag = aibn_backward(&grad_aibn_out, &model.aibn, &cache.aibn_cache)?;
    grads.gamma = ag.gamma;
    grads.beta = ag.beta;
    grads.alpha = ag.alpha;
    // mix backward
    for i in 0..n {
        for co in 0..model.c_mid {
            for k in 0..model.length {
                let g = ag.x.get(i, co, k);
                for ci in 0..model.c_in {
                    grads.mix[co * model.c_in + ci] += g * cache.x.get(i, ci, k);
                }
            }
        }
    }
    Ok(grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr_base: f64,
    pub lr_heads: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { lr_base: 0.0005, lr_heads: 0.005, momentum: 0.9, weight_decay: 5e-4 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_base > 0.0) || !(self.lr_heads > 0.0) {
            return Err(Error::InvalidConfig("sgd learning rates must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Base,
    Head,
}

/// Classic momentum update: v <- m*v + g + wd*p; p <- p - lr*v.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    cfg: &SgdConfig,
    group: ParamGroup,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::DimensionMismatch("sgd buffers".into()));
    }
    if !grads.iter().all(|g| g.is_finite()) {
        return Err(Error::Diverged("non-finite gradient".into()));
    }
    let lr = match group {
        ParamGroup::Base => cfg.lr_base,
        ParamGroup::Head => cfg.lr_heads,
    };
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = cfg.momentum * *v + g + cfg.weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// Apply one SGD step to every encoder parameter tensor.
pub fn sgd_step_encoder(
    model: &mut EncoderModel,
    grads: &EncoderGrads,
    velocity: &mut EncoderGrads,
    cfg: &SgdConfig,
) -> Result<()> {
    sgd_step(&mut model.mix, &grads.mix, &mut velocity.mix, cfg, ParamGroup::Base)?;
    sgd_step(&mut model.aibn.gamma, &grads.gamma, &mut velocity.gamma, cfg, ParamGroup::Base)?;
    sgd_step(&mut model.aibn.beta, &grads.beta, &mut velocity.beta, cfg, ParamGroup::Base)?;
    // No weight decay on the mixture weight; decay would drag it toward BN.
    let alpha_cfg = SgdConfig { weight_decay: 0.0, ..*cfg };
    sgd_step(&mut model.aibn.alpha, &grads.alpha, &mut velocity.alpha, &alpha_cfg, ParamGroup::Base)?;
    sgd_step(&mut model.proj, &grads.proj, &mut velocity.proj, cfg, ParamGroup::Base)?;
    sgd_step(&mut model.proj_bias, &grads.proj_bias, &mut velocity.proj_bias, cfg, ParamGroup::Base)?;
    sgd_step(&mut model.neck.scale, &grads.neck_scale, &mut velocity.neck_scale, cfg, ParamGroup::Base)?;
    Ok(())
}

/// Softmax classifier over an embedding, one per camera (or one global head).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    /// [m][d]
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub m: usize,
    pub d: usize,
    pub camera: Option<CameraId>,
}

impl ClassifierHead {
    pub fn new(m: usize, d: usize, camera: Option<CameraId>, rng: &mut Rng) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        ClassifierHead {
            weights: (0..m * d).map(|_| rng.normal() * std).collect(),
            bias: vec![0.0; m],
            m,
            d,
            camera,
        }
    }

    pub fn logits(&self, f: &[f64]) -> Vec<f64> {
        (0..self.m)
            .map(|j| {
                let row = &self.weights[j * self.d..(j + 1) * self.d];
                self.bias[j] + row.iter().zip(f).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect()
    }
}

/// Numerically stable softmax (max-subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_give_zero_embeddings() {
        let mut rng = Rng::new(1);
        let mut m = EncoderModel::new(3, 4, 5, 6, AlphaSharing::PerBlock, 0.5, &mut rng);
        for w in m.mix.iter_mut() {
            *w = 0.0;
        }
        for w in m.proj.iter_mut() {
            *w = 0.0;
        }
        let x = Tensor3 { n: 2, c: 3, l: 5, data: (0..30).map(|i| i as f64).collect() };
        let f = encode_eval(&m, &x).unwrap();
        assert!(f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let mut rng = Rng::new(2);
        let m = EncoderModel::new(3, 4, 5, 6, AlphaSharing::PerChannel, 0.5, &mut rng);
        let mut x = Tensor3::zeros(2, 3, 5);
        for v in x.data.iter_mut() {
            *v = rng.normal();
        }
        assert_eq!(encode_eval(&m, &x).unwrap(), encode_eval(&m, &x).unwrap());
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        let mut rng = Rng::new(3);
        let model0 = EncoderModel::new(3, 4, 5, 6, AlphaSharing::PerChannel, 0.5, &mut rng);
        let mut x = Tensor3::zeros(4, 3, 5);
        for v in x.data.iter_mut() {
            *v = rng.normal();
        }
        // Scalar loss: fixed random linear functional of the embeddings.
        let w: Vec<f64> = (0..4 * 6).map(|_| rng.normal()).collect();

        let mut model = model0.clone();
        let (f, cache) = encode_train(&mut model, &x).unwrap();
        let analytic = encode_backward(&model0, &cache, &w).unwrap().flatten();

        let params = model0.flatten_params();
        let eval = |p: &[f64]| -> f64 {
            let mut m = model0.clone();
            m.set_params(p);
            let (f, _) = encode_train(&mut m, &x).unwrap();
            f.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let _ = f;
        let h = 1e-5;
        // 5 probes per tensor region
        let mut rng2 = Rng::new(77);
        let mut checked = 0;
        while checked < 30 {
            let i = rng2.gen_range(0, params.len());
            let mut p = params.clone();
            p[i] += h;
            let lp = eval(&p);
            p[i] -= 2.0 * h;
            let lm = eval(&p);
            let num = (lp - lm) / (2.0 * h);
            let rel = (analytic[i] - num).abs()
                / f64::max(f64::max(analytic[i].abs(), num.abs()), 1e-6);
            assert!(rel < 1e-4, "param {i}: analytic {} vs fd {num}", analytic[i]);
            checked += 1;
        }
    }

    #[test]
    fn sgd_plain_step() {
        let mut p = vec![1.0];
        let mut v = vec![0.0];
        let cfg = SgdConfig { lr_base: 0.1, lr_heads: 0.1, momentum: 0.0, weight_decay: 0.0 };
        sgd_step(&mut p, &[1.0], &mut v, &cfg, ParamGroup::Base).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_two_steps() {
        // Hand iteration: v1 = 1, p1 = -0.1; v2 = 0.9 + 1 = 1.9, p2 = -0.29.
        let mut p = vec![0.0];
        let mut v = vec![0.0];
        let cfg = SgdConfig { lr_base: 0.1, lr_heads: 0.1, momentum: 0.9, weight_decay: 0.0 };
        sgd_step(&mut p, &[1.0], &mut v, &cfg, ParamGroup::Base).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-15);
        sgd_step(&mut p, &[1.0], &mut v, &cfg, ParamGroup::Base).unwrap();
        assert!((p[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn sgd_decay_only() {
        let mut p = vec![1.0];
        let mut v = vec![0.0];
        let cfg = SgdConfig { lr_base: 0.1, lr_heads: 0.1, momentum: 0.0, weight_decay: 0.1 };
        sgd_step(&mut p, &[0.0], &mut v, &cfg, ParamGroup::Base).unwrap();
        assert!((p[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_non_finite_gradient() {
        let mut p = vec![1.0];
        let mut v = vec![0.0];
        let cfg = SgdConfig::default();
        assert!(matches!(
            sgd_step(&mut p, &[f64::NAN], &mut v, &cfg, ParamGroup::Base),
            Err(Error::Diverged(_))
        ));
    }

    #[test]
    fn neck_only_round_trip() {
        let m = EncoderModel::neck_only(4);
        let x = Tensor3 { n: 2, c: 4, l: 1, data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0] };
        // fresh running stats: mean 0, var 1 -> output ~ input/sqrt(1+eps)
        let f = encode_eval(&m, &x).unwrap();
        for (a, b) in f.iter().zip(&x.data) {
            assert!((a - b / (1.0f64 + 1e-5).sqrt()).abs() < 1e-12);
        }
    }
}
