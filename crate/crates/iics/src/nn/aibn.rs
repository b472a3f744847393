//! Adaptive instance/batch normalization: per channel, the normalization
//! statistics are a convex mix of batch statistics (over the whole batch) and
//! instance statistics (per item), weighted by a learnable alpha that is
//! clamped to [0, 1] at forward time.

use serde::{Deserialize, Serialize};

use crate::nn::Tensor3;
use crate::{Error, Result};

/// How channels share the alpha mixture weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaSharing {
    /// One alpha per channel.
    PerChannel,
    /// All channels of one normalization layer share a single alpha.
    PerBlock,
    /// Alias of per-block for a single-layer stack; kept as a distinct
    /// setting so configs can express the sharing ablation.
    PerLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AibnState {
    /// One entry per sharing group.
    pub alpha: Vec<f64>,
    pub sharing: AlphaSharing,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
    /// When false, alpha receives no gradient (fixed-mixture ablation).
    pub alpha_learnable: bool,
}

impl AibnState {
    pub fn new(channels: usize, sharing: AlphaSharing, alpha_init: f64) -> Self {
        let groups = match sharing {
            AlphaSharing::PerChannel => channels,
            AlphaSharing::PerBlock | AlphaSharing::PerLayer => 1,
        };
        AibnState {
            alpha: vec![alpha_init; groups],
            sharing,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon: 1e-5,
            momentum: 0.1,
            alpha_learnable: true,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    #[inline]
    pub fn group_of(&self, channel: usize) -> usize {
        match self.sharing {
            AlphaSharing::PerChannel => channel,
            AlphaSharing::PerBlock | AlphaSharing::PerLayer => 0,
        }
    }

    /// Alpha after the forward-time clamp.
    #[inline]
    pub fn clamped_alpha(&self, channel: usize) -> f64 {
        self.alpha[self.group_of(channel)].clamp(0.0, 1.0)
    }

    /// Whether the stored alpha for `channel` sits strictly outside [0, 1],
    /// where the clamp is flat and the alpha gradient vanishes.
    #[inline]
    fn clamp_active(&self, channel: usize) -> bool {
        let a = self.alpha[self.group_of(channel)];
        !(0.0..=1.0).contains(&a)
    }
}

/// Forward intermediates needed by the backward pass.
#[derive(Debug, Clone)]
pub struct AibnCache {
    pub x: Tensor3,
    pub mu_bn: Vec<f64>,
    pub var_bn: Vec<f64>,
    /// [n][ch]
    pub mu_in: Vec<f64>,
    pub var_in: Vec<f64>,
    /// 1/sqrt(mixed var + eps), [n][ch]
    pub denom: Vec<f64>,
    /// Normalized activations before the affine transform.
    pub z: Tensor3,
    /// Clamped alpha per channel.
    pub a: Vec<f64>,
}

pub struct AibnGrads {
    pub x: Tensor3,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// Forward pass. Train mode uses batch statistics over (N, L) and updates the
/// running statistics; eval mode uses running batch statistics but live
/// instance statistics.
pub fn aibn_forward(
    x: &Tensor3,
    state: &mut AibnState,
    mode: Mode,
) -> Result<(Tensor3, Option<AibnCache>)> {
    let (n, ch, l) = (x.n, x.c, x.l);
    if ch != state.channels() {
        return Err(Error::DimensionMismatch(format!(
            "aibn: {ch} channels, state has {}",
            state.channels()
        )));
    }
    if mode == Mode::Train && n < 2 {
        return Err(Error::BatchTooSmall);
    }

    let mut mu_bn = vec![0.0; ch];
    let mut var_bn = vec![0.0; ch];
    match mode {
        Mode::Train => {
            for c in 0..ch {
                let mut sum = 0.0;
                let mut sq = 0.0;
                for i in 0..n {
                    for k in 0..l {
                        let v = x.get(i, c, k);
                        sum += v;
                        sq += v * v;
                    }
                }
                let count = (n * l) as f64;
                mu_bn[c] = sum / count;
                var_bn[c] = (sq / count - mu_bn[c] * mu_bn[c]).max(0.0);
            }
        }
        Mode::Eval => {
            mu_bn.copy_from_slice(&state.running_mean);
            var_bn.copy_from_slice(&state.running_var);
        }
    }

    // Instance statistics over L, always from the live input.
    let mut mu_in = vec![0.0; n * ch];
    let mut var_in = vec![0.0; n * ch];
    for i in 0..n {
        for c in 0..ch {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for k in 0..l {
                let v = x.get(i, c, k);
                sum += v;
                sq += v * v;
            }
            let m = sum / l as f64;
            mu_in[i * ch + c] = m;
            var_in[i * ch + c] = (sq / l as f64 - m * m).max(0.0);
        }
    }

    let a: Vec<f64> = (0..ch).map(|c| state.clamped_alpha(c)).collect();
    let mut denom = vec![0.0; n * ch];
    let mut z = Tensor3::zeros(n, ch, l);
    let mut y = Tensor3::zeros(n, ch, l);
    for i in 0..n {
        for c in 0..ch {
            let mu = a[c] * mu_bn[c] + (1.0 - a[c]) * mu_in[i * ch + c];
            let var = a[c] * var_bn[c] + (1.0 - a[c]) * var_in[i * ch + c];
            let d = (var + state.epsilon).sqrt();
            denom[i * ch + c] = d;
            for k in 0..l {
                let zz = (x.get(i, c, k) - mu) / d;
                z.set(i, c, k, zz);
                y.set(i, c, k, state.gamma[c] * zz + state.beta[c]);
            }
        }
    }

    if mode == Mode::Train {
        let m = state.momentum;
        for c in 0..ch {
            state.running_mean[c] = (1.0 - m) * state.running_mean[c] + m * mu_bn[c];
            state.running_var[c] = (1.0 - m) * state.running_var[c] + m * var_bn[c];
        }
        let cache = AibnCache { x: x.clone(), mu_bn, var_bn, mu_in, var_in, denom, z, a };
        Ok((y, Some(cache)))
    } else {
        Ok((y, None))
    }
}

/// Exact analytic gradients of the train-mode forward, including the
/// dependence of the mixed mean/variance on the input and on alpha.
pub fn aibn_backward(grad_out: &Tensor3, state: &AibnState, cache: &AibnCache) -> Result<AibnGrads> {
    let (n, ch, l) = (cache.x.n, cache.x.c, cache.x.l);
    if (grad_out.n, grad_out.c, grad_out.l) != (n, ch, l) {
        return Err(Error::DimensionMismatch("aibn backward shape".into()));
    }
    let nl = (n * l) as f64;
    let lf = l as f64;

    let mut grad_x = Tensor3::zeros(n, ch, l);
    let mut grad_gamma = vec![0.0; ch];
    let mut grad_beta = vec![0.0; ch];
    let mut grad_alpha = vec![0.0; state.alpha.len()];

    for c in 0..ch {
        let a = cache.a[c];
        // G = dL/dz
        // Per-channel reductions used by the chain rule through the mixed
        // statistics.
        let mut s1 = 0.0; // sum G/denom
        let mut s1n = vec![0.0; n]; // sum_l G
        let mut t = vec![0.0; n]; // sum_l G*z/denom^2
        for i in 0..n {
            let d = cache.denom[i * ch + c];
            for k in 0..l {
                let go = grad_out.get(i, c, k);
                grad_gamma[c] += go * cache.z.get(i, c, k);
                grad_beta[c] += go;
                let g = go * state.gamma[c];
                s1 += g / d;
                s1n[i] += g;
                t[i] += g * cache.z.get(i, c, k) / (d * d);
            }
        }
        let u: f64 = t.iter().sum();

        for i in 0..n {
            let d = cache.denom[i * ch + c];
            for k in 0..l {
                let g = grad_out.get(i, c, k) * state.gamma[c];
                let xv = cache.x.get(i, c, k);
                let gx = g / d
                    - (a / nl) * s1
                    - ((1.0 - a) / lf) * s1n[i] / d
                    - (a / nl) * (xv - cache.mu_bn[c]) * u
                    - ((1.0 - a) / lf) * (xv - cache.mu_in[i * ch + c]) * t[i];
                grad_x.add(i, c, k, gx);
            }
        }

        if state.alpha_learnable && !state.clamp_active(c) {
            let mut ga = 0.0;
            for i in 0..n {
                let d = cache.denom[i * ch + c];
                let dmu = cache.mu_bn[c] - cache.mu_in[i * ch + c];
                let dvar = cache.var_bn[c] - cache.var_in[i * ch + c];
                for k in 0..l {
                    let g = grad_out.get(i, c, k) * state.gamma[c];
                    ga += g * (-dmu / d - cache.z.get(i, c, k) * dvar / (2.0 * d * d));
                }
            }
            grad_alpha[state.group_of(c)] += ga;
        }
    }

    Ok(AibnGrads { x: grad_x, gamma: grad_gamma, beta: grad_beta, alpha: grad_alpha })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core::Rng;

    fn random_tensor(rng: &mut Rng, n: usize, c: usize, l: usize) -> Tensor3 {
        let mut t = Tensor3::zeros(n, c, l);
        for v in t.data.iter_mut() {
            *v = rng.normal();
        }
        t
    }

    /// Plain batch normalization, written independently.
    fn bn_reference(x: &Tensor3, eps: f64) -> Tensor3 {
        let mut out = Tensor3::zeros(x.n, x.c, x.l);
        for c in 0..x.c {
            let count = (x.n * x.l) as f64;
            let mut mean = 0.0;
            for i in 0..x.n {
                for k in 0..x.l {
                    mean += x.get(i, c, k);
                }
            }
            mean /= count;
            let mut var = 0.0;
            for i in 0..x.n {
                for k in 0..x.l {
                    var += (x.get(i, c, k) - mean).powi(2);
                }
            }
            var /= count;
            for i in 0..x.n {
                for k in 0..x.l {
                    out.set(i, c, k, (x.get(i, c, k) - mean) / (var + eps).sqrt());
                }
            }
        }
        out
    }

    /// Plain instance normalization, written independently.
    fn in_reference(x: &Tensor3, eps: f64) -> Tensor3 {
        let mut out = Tensor3::zeros(x.n, x.c, x.l);
        for i in 0..x.n {
            for c in 0..x.c {
                let mut mean = 0.0;
                for k in 0..x.l {
                    mean += x.get(i, c, k);
                }
                mean /= x.l as f64;
                let mut var = 0.0;
                for k in 0..x.l {
                    var += (x.get(i, c, k) - mean).powi(2);
                }
                var /= x.l as f64;
                for k in 0..x.l {
                    out.set(i, c, k, (x.get(i, c, k) - mean) / (var + eps).sqrt());
                }
            }
        }
        out
    }

    #[test]
    fn alpha_one_is_batch_norm() {
        let mut rng = Rng::new(10);
        for _ in 0..10 {
            let x = random_tensor(&mut rng, 3, 2, 4);
            let mut st = AibnState::new(2, AlphaSharing::PerBlock, 1.0);
            let (y, _) = aibn_forward(&x, &mut st, Mode::Train).unwrap();
            let want = bn_reference(&x, st.epsilon);
            for (a, b) in y.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn alpha_zero_is_instance_norm() {
        let mut rng = Rng::new(11);
        for _ in 0..10 {
            let x = random_tensor(&mut rng, 3, 2, 4);
            let mut st = AibnState::new(2, AlphaSharing::PerBlock, 0.0);
            let (y, _) = aibn_forward(&x, &mut st, Mode::Train).unwrap();
            let want = in_reference(&x, st.epsilon);
            for (a, b) in y.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn half_mixed_hand_case() {
        // N=2, Ch=1, L=2, values [[1,3],[5,7]], alpha=0.5, gamma=1, beta=0.
        // Batch stats: mu_bn=4, var_bn=5. Instance: mu_in=[2,6], var_in=[1,1].
        // Expected outputs evaluated from the closed form by scalar arithmetic.
        let mut x = Tensor3::zeros(2, 1, 2);
        x.set(0, 0, 0, 1.0);
        x.set(0, 0, 1, 3.0);
        x.set(1, 0, 0, 5.0);
        x.set(1, 0, 1, 7.0);
        let mut st = AibnState::new(1, AlphaSharing::PerBlock, 0.5);
        st.epsilon = 0.0;
        let (y, cache) = aibn_forward(&x, &mut st, Mode::Train).unwrap();
        let cache = cache.unwrap();
        assert!((cache.mu_bn[0] - 4.0).abs() < 1e-12);
        assert!((cache.var_bn[0] - 5.0).abs() < 1e-12);
        assert_eq!(cache.mu_in, vec![2.0, 6.0]);
        assert_eq!(cache.var_in, vec![1.0, 1.0]);
        // mixed mean for item 0: 0.5*4 + 0.5*2 = 3; var: 0.5*5+0.5*1 = 3
        // item 1: mean 5, var 3. denom = sqrt(3).
        let d = 3.0f64.sqrt();
        let want = [
            (1.0 - 3.0) / d,
            (3.0 - 3.0) / d,
            (5.0 - 5.0) / d,
            (7.0 - 5.0) / d,
        ];
        for (a, b) in y.data.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn train_needs_two_items() {
        let x = Tensor3::zeros(1, 2, 3);
        let mut st = AibnState::new(2, AlphaSharing::PerBlock, 0.5);
        assert!(matches!(
            aibn_forward(&x, &mut st, Mode::Train),
            Err(crate::Error::BatchTooSmall)
        ));
    }

    #[test]
    fn gamma_gradient_is_sum_of_normalized_activations() {
        let mut rng = Rng::new(12);
        let x = random_tensor(&mut rng, 3, 2, 4);
        let mut st = AibnState::new(2, AlphaSharing::PerBlock, 0.5);
        let (_, cache) = aibn_forward(&x, &mut st, Mode::Train).unwrap();
        let cache = cache.unwrap();
        let ones = Tensor3 { n: 3, c: 2, l: 4, data: vec![1.0; 24] };
        let grads = aibn_backward(&ones, &st, &cache).unwrap();
        for c in 0..2 {
            let mut want = 0.0;
            for i in 0..3 {
                for k in 0..4 {
                    want += cache.z.get(i, c, k);
                }
            }
            assert!((grads.gamma[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(13);
        let x = random_tensor(&mut rng, 4, 3, 5);
        let st0 = {
            let mut s = AibnState::new(3, AlphaSharing::PerChannel, 0.5);
            for (i, g) in s.gamma.iter_mut().enumerate() {
                *g = 1.0 + 0.1 * i as f64;
            }
            s.beta = vec![0.3, -0.2, 0.1];
            s
        };
        // Scalar loss: weighted sum of outputs (weights fixed by the rng).
        let w: Vec<f64> = (0..4 * 3 * 5).map(|_| rng.normal()).collect();
        let loss = |x: &Tensor3, st: &AibnState| -> f64 {
            let mut s = st.clone();
            let (y, _) = aibn_forward(x, &mut s, Mode::Train).unwrap();
            y.data.iter().zip(&w).map(|(a, b)| a * b).sum()
        };

        let mut st = st0.clone();
        let (_, cache) = aibn_forward(&x, &mut st, Mode::Train).unwrap();
        let cache = cache.unwrap();
        let mut grad_out = Tensor3::zeros(4, 3, 5);
        grad_out.data.copy_from_slice(&w);
        let grads = aibn_backward(&grad_out, &st0, &cache).unwrap();

        let h = 1e-5;
        let rel = |a: f64, n: f64| (a - n).abs() / f64::max(f64::max(a.abs(), n.abs()), 1e-6);

        // x gradients (probe a subset)
        for &idx in &[0usize, 7, 23, 41, 59] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let lp = loss(&xp, &st0);
            xp.data[idx] -= 2.0 * h;
            let lm = loss(&xp, &st0);
            let num = (lp - lm) / (2.0 * h);
            assert!(rel(grads.x.data[idx], num) < 1e-4, "x[{idx}]");
        }
        // gamma, beta, alpha
        for c in 0..3 {
            for (anal, field) in [(grads.gamma[c], "gamma"), (grads.beta[c], "beta"), (grads.alpha[c], "alpha")]
            {
                let bump = |s: &mut AibnState, d: f64| match field {
                    "gamma" => s.gamma[c] += d,
                    "beta" => s.beta[c] += d,
                    _ => s.alpha[c] += d,
                };
                let mut sp = st0.clone();
                bump(&mut sp, h);
                let lp = loss(&x, &sp);
                bump(&mut sp, -2.0 * h);
                let lm = loss(&x, &sp);
                let num = (lp - lm) / (2.0 * h);
                assert!(rel(anal, num) < 1e-4, "{field}[{c}]: {anal} vs {num}");
            }
        }
    }

    #[test]
    fn clamp_is_flat_outside_unit_interval() {
        let mut rng = Rng::new(14);
        let x = random_tensor(&mut rng, 3, 2, 4);
        for stored in [1.7, -0.5] {
            let mut st = AibnState::new(2, AlphaSharing::PerBlock, stored);
            let (y, cache) = aibn_forward(&x, &mut st, Mode::Train).unwrap();
            let mut ref_st = AibnState::new(2, AlphaSharing::PerBlock, stored.clamp(0.0, 1.0));
            let (y_ref, _) = aibn_forward(&x, &mut ref_st, Mode::Train).unwrap();
            assert_eq!(y.data, y_ref.data);
            let ones = Tensor3 { n: 3, c: 2, l: 4, data: vec![1.0; 24] };
            let grads = aibn_backward(&ones, &st, &cache.unwrap()).unwrap();
            assert_eq!(grads.alpha, vec![0.0]);
        }
    }

    #[test]
    fn running_stats_update_rule() {
        let mut rng = Rng::new(15);
        let x = random_tensor(&mut rng, 4, 1, 4);
        let mut st = AibnState::new(1, AlphaSharing::PerBlock, 0.5);
        let (_, cache) = aibn_forward(&x, &mut st, Mode::Train).unwrap();
        let cache = cache.unwrap();
        // started from running_mean 0, running_var 1
        assert!((st.running_mean[0] - 0.1 * cache.mu_bn[0]).abs() < 1e-12);
        assert!((st.running_var[0] - (0.9 + 0.1 * cache.var_bn[0])).abs() < 1e-12);
    }
}
