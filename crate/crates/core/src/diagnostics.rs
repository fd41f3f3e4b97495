//! Trace audits: norm inequalities, regret accounting, and decay fits.
//!
//! [`audit`] replays a recorded metrics trace and checks, at every prefix
//! `T`:
//!
//! * the column-norm inequality `½ Σ_{t≤T} ‖q_t‖²_{ψ*_t} ≤ Σ_i ‖q_{1:T,i}‖₂`,
//! * its lagged variant under the `η/(2H)` weighting (only meaningful when
//!   the run kept `δ ≥ max_t ‖q_t‖∞`, the strict-δ mode),
//! * average regret against a reference iterate and its dominance by the
//!   bound `d·G∞/√T + d·G∞·D∞/(2η√T)` (checked only for unbiased-quantizer
//!   runs, which is what the bound covers).
//!
//! It also fits `log(avg regret)` against `log T` by least squares; a slope
//! near -1/2 is consistent with `O(1/√T)` decay.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::engine::RoundMetrics;
use crate::quantize::{
    optimal_ternary_oracle, quantization_error, stochastic_ternary, threshold_approx,
    threshold_exact,
};
use crate::{Error, Result};

/// What to check and with which tolerances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditOptions {
    /// Relative slack for floating-point inequality checks.
    pub ineq_tol: f64,
    /// Check the lagged (strict-δ) inequality.
    pub check_lagged: bool,
    /// Check average-regret dominance by the adaptive bound.
    pub check_bound: bool,
    /// Learning rate of the audited run.
    pub eta: f64,
    /// Adaptive offset δ of the audited run.
    pub delta: f64,
    /// Model dimension of the audited run.
    pub dim: usize,
    /// Skip this many leading rounds in the decay fit (early rounds are
    /// dominated by transients).
    pub fit_min_round: u64,
}

impl AuditOptions {
    pub fn new(eta: f64, delta: f64, dim: usize) -> Self {
        Self {
            ineq_tol: 1e-9,
            check_lagged: false,
            check_bound: false,
            eta,
            delta,
            dim,
            fit_min_round: 10,
        }
    }
}

/// Audit outcome over a full trace.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditReport {
    pub rounds: u64,
    pub colnorm_violations: u64,
    /// max over prefixes of LHS/RHS (≤ 1 when the inequality holds).
    pub colnorm_max_ratio: f64,
    pub lagged_checked: bool,
    pub lagged_violations: u64,
    pub lagged_max_ratio: f64,
    /// Whether δ ≥ max_t ‖q_t‖∞ actually held (strict-mode precondition).
    pub delta_covers_q_inf: Option<bool>,
    pub max_q_inf: f64,
    pub g_inf: f64,
    pub d_inf: Option<f64>,
    /// `(1/T) Σ (f_t(x_t)+φ(x_t) - f_t(x*)-φ(x*))` at the final prefix.
    pub final_avg_regret: Option<f64>,
    /// Same, with the post-update iterate `x_{t+1}` in place of `x_t`.
    pub final_avg_regret_next: Option<f64>,
    pub regret_bound_final: Option<f64>,
    pub bound_checked: bool,
    pub bound_violations: u64,
    /// Least-squares slope of `log(avg regret)` vs `log T`.
    pub regret_slope: Option<f64>,
}

impl AuditReport {
    /// No inequality or dominance violations anywhere in the trace.
    pub fn clean(&self) -> bool {
        self.colnorm_violations == 0 && self.lagged_violations == 0 && self.bound_violations == 0
    }
}

/// Least-squares slope of `ln y` against `ln x`; `None` with fewer than two
/// usable points.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|&&(x, y)| x > 0.0 && y > 0.0)
        .map(|&(x, y)| (x.ln(), y.ln()))
        .collect();
    if logs.len() < 2 {
        return None;
    }
    let n = logs.len() as f64;
    let mean_x = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in logs {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
    }
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Replays a trace and checks every prefix. Records must be consecutive
/// rounds starting at 1.
pub fn audit(records: &[RoundMetrics], opts: &AuditOptions) -> Result<AuditReport> {
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    for (i, r) in records.iter().enumerate() {
        if r.round != i as u64 + 1 {
            return Err(Error::InvalidConfig(format!(
                "trace is not consecutive: record {} has round {}",
                i, r.round
            )));
        }
    }

    let slack = |rhs: f64| rhs * (1.0 + opts.ineq_tol) + 1e-12;

    let mut dual_sum = 0.0;
    let mut lagged_sum = 0.0;
    let mut colnorm_violations = 0;
    let mut lagged_violations = 0;
    let mut colnorm_max_ratio = 0.0_f64;
    let mut lagged_max_ratio = 0.0_f64;
    let mut max_q_inf = 0.0_f64;
    let mut d_inf: Option<f64> = None;
    let mut regret_sum = 0.0;
    let mut regret_next_sum = 0.0;
    let mut have_ref = false;
    let mut bound_violations = 0;
    let mut final_avg_regret = None;
    let mut final_avg_regret_next = None;
    let mut regret_bound_final = None;
    let mut fit_points: Vec<(f64, f64)> = Vec::new();

    for r in records {
        let t = r.round as f64;
        dual_sum += r.dual_norm_sq;
        lagged_sum += r.dual_norm_sq_lagged;
        max_q_inf = max_q_inf.max(r.q_inf);

        let lhs1 = 0.5 * dual_sum;
        if lhs1 > slack(r.col_norm_sum) {
            colnorm_violations += 1;
        }
        if r.col_norm_sum > 0.0 {
            colnorm_max_ratio = colnorm_max_ratio.max(lhs1 / r.col_norm_sum);
        }
        if opts.check_lagged {
            let lhs2 = 0.5 * lagged_sum;
            if lhs2 > slack(r.col_norm_sum) {
                lagged_violations += 1;
            }
            if r.col_norm_sum > 0.0 {
                lagged_max_ratio = lagged_max_ratio.max(lhs2 / r.col_norm_sum);
            }
        }

        if let Some(di) = r.dist_inf {
            d_inf = Some(d_inf.unwrap_or(0.0).max(di));
        }
        if let Some(obj_ref) = r.obj_ref {
            have_ref = true;
            regret_sum += r.obj_current - obj_ref;
            regret_next_sum += r.obj_next - obj_ref;
            let avg = regret_sum / t;
            let bound = {
                let d = opts.dim as f64;
                let dinf = d_inf.unwrap_or(0.0);
                d * r.g_inf / t.sqrt() + d * r.g_inf * dinf / (2.0 * opts.eta * t.sqrt())
            };
            if opts.check_bound && avg > bound * (1.0 + opts.ineq_tol) + 1e-12 {
                bound_violations += 1;
            }
            if r.round >= opts.fit_min_round {
                fit_points.push((t, avg));
            }
            final_avg_regret = Some(avg);
            final_avg_regret_next = Some(regret_next_sum / t);
            regret_bound_final = Some(bound);
        }
    }

    let last = records.last().expect("nonempty");
    Ok(AuditReport {
        rounds: last.round,
        colnorm_violations,
        colnorm_max_ratio,
        lagged_checked: opts.check_lagged,
        lagged_violations,
        lagged_max_ratio,
        delta_covers_q_inf: opts.check_lagged.then_some(opts.delta >= max_q_inf),
        max_q_inf,
        g_inf: last.g_inf,
        d_inf,
        final_avg_regret,
        final_avg_regret_next,
        regret_bound_final,
        bound_checked: opts.check_bound && have_ref,
        bound_violations,
        regret_slope: fit_loglog_slope(&fit_points),
    })
}

/// Outcome of the randomized quantizer certification.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuantCheckReport {
    pub trials: u64,
    /// Exact-solver error above the brute-force optimum (beyond tolerance).
    pub oracle_violations: u64,
    /// Approximate-threshold error below the exact error (impossible if the
    /// exact solver really is optimal).
    pub approx_violations: u64,
    /// Stochastic-draw error below the exact error.
    pub stochastic_violations: u64,
    /// Largest relative gap observed between exact and oracle errors.
    pub max_oracle_rel_gap: f64,
    /// Largest relative excess of the approximate over the exact error.
    pub max_approx_excess: f64,
}

impl QuantCheckReport {
    pub fn clean(&self) -> bool {
        self.oracle_violations == 0
            && self.approx_violations == 0
            && self.stochastic_violations == 0
    }
}

/// Certifies the exact threshold solver against the `3^d` brute-force oracle
/// on random Gaussian vectors and checks the error-dominance ordering
/// (exact ≤ approx, exact ≤ every stochastic realization).
///
/// `max_dim` is capped at 12 so the oracle stays cheap.
pub fn quantizer_check(
    trials: u64,
    max_dim: usize,
    stochastic_draws: u32,
    seed: u64,
    rel_tol: f64,
) -> Result<QuantCheckReport> {
    if max_dim == 0 || max_dim > 12 {
        return Err(Error::InvalidConfig(format!(
            "max_dim must be in 1..=12 for the oracle, got {max_dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = QuantCheckReport {
        trials,
        oracle_violations: 0,
        approx_violations: 0,
        stochastic_violations: 0,
        max_oracle_rel_gap: 0.0,
        max_approx_excess: 0.0,
    };
    for _ in 0..trials {
        let dim = rng.random_range(1..=max_dim);
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();

        let exact = threshold_exact(&v)?;
        let e_exact = quantization_error(&v, &exact)?;
        let oracle = optimal_ternary_oracle(&v)?;
        let gap = (e_exact - oracle.error).abs() / oracle.error.max(1e-3);
        report.max_oracle_rel_gap = report.max_oracle_rel_gap.max(gap);
        if e_exact > oracle.error + rel_tol * oracle.error.max(1e-3) {
            report.oracle_violations += 1;
        }

        let e_approx = quantization_error(&v, &threshold_approx(&v)?)?;
        if e_exact > e_approx + rel_tol * e_approx.max(1e-3) {
            report.approx_violations += 1;
        }
        if e_exact > 0.0 {
            report.max_approx_excess = report.max_approx_excess.max(e_approx / e_exact - 1.0);
        }

        for _ in 0..stochastic_draws {
            let draw = stochastic_ternary(&v, &mut rng)?;
            let e_draw = quantization_error(&v, &draw)?;
            if e_exact > e_draw + rel_tol * e_draw.max(1e-3) {
                report.stochastic_violations += 1;
            }
        }
    }
    Ok(report)
}
