//! Central finite-difference verification of analytic gradients.

use crate::core::Rng;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub n_probes: usize,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} ({} probes, max rel err {:.3e}, tol {:.1e})",
            if self.pass { "PASS" } else { "FAIL" },
            self.n_probes,
            self.max_rel_err,
            self.tol
        )
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / f64::max(f64::max(a.abs(), b.abs()), 1e-6)
}

/// Probe `n_probes` randomly chosen scalar parameters with central
/// differences of step `h` and compare against `analytic`. `eval` must
/// recompute the scalar loss from a fresh parameter vector each call.
pub fn grad_check<F>(
    params: &[f64],
    analytic: &[f64],
    mut eval: F,
    n_probes: usize,
    h: f64,
    tol: f64,
    rng: &mut Rng,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    let mut max_rel = 0.0f64;
    for _ in 0..n_probes {
        let i = rng.gen_range(0, params.len());
        let mut p = params.to_vec();
        p[i] += h;
        let lp = eval(&p);
        p[i] -= 2.0 * h;
        let lm = eval(&p);
        let numeric = (lp - lm) / (2.0 * h);
        max_rel = max_rel.max(rel_err(analytic[i], numeric));
    }
    GradCheckReport { n_probes, max_rel_err: max_rel, tol, pass: max_rel <= tol }
}
