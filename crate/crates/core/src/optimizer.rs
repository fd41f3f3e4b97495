//! Training update rules over (parameters, adaptive accumulators).
//!
//! Three closed forms cover the five configurable methods:
//!
//! * composite mirror descent with per-coordinate adaptive steps and l1
//!   soft-thresholding (`Cmd` on full-precision gradients, `Qcmd` on
//!   quantized ones),
//! * regularized dual averaging from the running gradient sum with l1
//!   truncation (`Rda` / `Qrda`),
//! * plain proximal gradient descent (`ProxGd`).
//!
//! The quantized and full-precision variants share the same arithmetic; they
//! differ only in which gradient sequence is fed in, so feeding a `Qcmd`
//! state full-precision gradients reproduces `Cmd` bit for bit.
//!
//! Soft-thresholding uses `max(0, .)`, so parameters hit exact zeros and the
//! nonzero test behind [`build_indicator`] needs no epsilon. `sign(0)` is 0.

use serde::{Deserialize, Serialize};

use crate::codec::IndicatorBitmap;
use crate::{Error, Result};

/// Update-rule selector. `Cmd`, `Rda`, and `ProxGd` are the 32-bit
/// full-precision baselines; `Qcmd` and `Qrda` are their quantized-gradient
/// counterparts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ProxGd,
    Cmd,
    Rda,
    Qcmd,
    Qrda,
}

impl Method {
    /// Whether the method consumes quantized gradients (selects whether the
    /// configured quantizer applies or the run is a full-precision baseline).
    pub fn is_quantized(self) -> bool {
        matches!(self, Method::Qcmd | Method::Qrda)
    }

    fn is_mirror_descent(self) -> bool {
        matches!(self, Method::Cmd | Method::Qcmd)
    }
}

/// Hyperparameters shared by all update rules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub method: Method,
    /// Learning rate (eta > 0).
    pub eta: f64,
    /// l1 coefficient (lambda >= 0).
    pub lambda: f64,
    /// Adaptive-matrix offset (delta >= 0; > 0 for mirror-descent methods).
    pub delta: f64,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "eta must be > 0, got {}",
                self.eta
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "delta must be >= 0, got {}",
                self.delta
            )));
        }
        if self.method.is_mirror_descent() && self.delta == 0.0 {
            return Err(Error::InvalidConfig(
                "mirror-descent methods need delta > 0 to keep the adaptive matrix invertible"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Per-coordinate accumulated squared gradients plus the fixed offset
/// `delta`; the adaptive matrix diagonal is `delta + sqrt(sq_accum[i])`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveState {
    sq_accum: Vec<f64>,
    delta: f64,
}

impl AdaptiveState {
    pub fn new(dim: usize, delta: f64) -> Self {
        Self {
            sq_accum: vec![0.0; dim],
            delta,
        }
    }

    pub fn dim(&self) -> usize {
        self.sq_accum.len()
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Diagonal entry `H_ii = delta + ||g_{1:t,i}||_2`.
    pub fn h(&self, i: usize) -> f64 {
        self.delta + self.sq_accum[i].sqrt()
    }

    /// Per-coordinate `||g_{1:t,i}||_2^2` history.
    pub fn sq_accum(&self) -> &[f64] {
        &self.sq_accum
    }

    /// Folds one gradient into the squared history (coordinate-wise
    /// non-decreasing).
    pub fn accumulate(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.sq_accum.len());
        for (acc, &gi) in self.sq_accum.iter_mut().zip(g) {
            *acc += gi * gi;
        }
    }

    /// Dual-norm square `‖v‖²_{ψ*} = Σ_i v_i² / H_ii`. Zero coordinates
    /// contribute zero even when their diagonal entry is zero.
    pub fn psi_star_norm_sq(&self, v: &[f64]) -> f64 {
        debug_assert_eq!(v.len(), self.sq_accum.len());
        v.iter()
            .enumerate()
            .filter(|&(_, &vi)| vi != 0.0)
            .map(|(i, &vi)| vi * vi / self.h(i))
            .sum()
    }

    /// `Σ_i ‖g_{1:t,i}‖₂` — the right-hand side of the column-norm
    /// inequality audits.
    pub fn column_norm_sum(&self) -> f64 {
        self.sq_accum.iter().map(|s| s.sqrt()).sum()
    }

    /// `max_i ‖g_{1:t,i}‖₂` (the G∞ estimate).
    pub fn column_norm_max(&self) -> f64 {
        self.sq_accum.iter().fold(0.0_f64, |m, s| m.max(s.sqrt()))
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `sign(u) * max(0, |u| - shrink)`; zeros are exact.
fn soft_threshold(u: f64, shrink: f64) -> f64 {
    sign(u) * (u.abs() - shrink).max(0.0)
}

/// Model parameters plus the method-specific accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    x: Vec<f64>,
    grad_sum: Vec<f64>,
    t: u64,
    adaptive: AdaptiveState,
}

impl OptimizerState {
    /// Fresh state at the origin (`x_0 = 0`).
    pub fn new(dim: usize, delta: f64) -> Self {
        Self {
            x: vec![0.0; dim],
            grad_sum: vec![0.0; dim],
            t: 0,
            adaptive: AdaptiveState::new(dim, delta),
        }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    /// Number of applied updates.
    pub fn round(&self) -> u64 {
        self.t
    }

    pub fn adaptive(&self) -> &AdaptiveState {
        &self.adaptive
    }

    /// Running sum of all gradients passed to `step` (consumed by the
    /// dual-averaging rules).
    pub fn grad_sum(&self) -> &[f64] {
        &self.grad_sum
    }

    fn check_gradient(&self, g: &[f64]) -> Result<()> {
        if g.len() != self.x.len() {
            return Err(Error::DimMismatch {
                expected: self.x.len(),
                got: g.len(),
            });
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        Ok(())
    }

    /// Applies one update with the method's rule. The squared history is
    /// folded in before the step, so the adaptive matrix includes the
    /// current gradient.
    pub fn step(&mut self, g: &[f64], cfg: &OptimizerConfig) -> Result<()> {
        self.check_gradient(g)?;
        for (zs, &gi) in self.grad_sum.iter_mut().zip(g) {
            *zs += gi;
        }
        self.adaptive.accumulate(g);
        self.t += 1;

        match cfg.method {
            Method::Cmd | Method::Qcmd => {
                for i in 0..self.x.len() {
                    let h = self.adaptive.h(i);
                    let u = self.x[i] - cfg.eta * g[i] / h;
                    self.x[i] = soft_threshold(u, cfg.lambda * cfg.eta / h);
                }
            }
            Method::Rda | Method::Qrda => {
                let t = self.t as f64;
                for i in 0..self.x.len() {
                    let z = self.grad_sum[i];
                    let truncated = (z.abs() / t - cfg.lambda).max(0.0);
                    self.x[i] = if truncated == 0.0 {
                        0.0
                    } else {
                        sign(-z) * t * cfg.eta / self.adaptive.h(i) * truncated
                    };
                }
            }
            Method::ProxGd => {
                for i in 0..self.x.len() {
                    let u = self.x[i] - cfg.eta * g[i];
                    self.x[i] = soft_threshold(u, cfg.lambda * cfg.eta);
                }
            }
        }
        Ok(())
    }

    /// The local tentative parameters `x̂_{t+1}` the indicator is built
    /// from: the method's update evaluated against an adaptive matrix built
    /// from the historical accumulators plus the current full-precision
    /// gradient's square. Does not mutate the state.
    pub fn tentative(&self, g: &[f64], cfg: &OptimizerConfig) -> Result<Vec<f64>> {
        self.check_gradient(g)?;
        let hat_h =
            |i: usize| self.adaptive.delta + (self.adaptive.sq_accum[i] + g[i] * g[i]).sqrt();

        let mut out = vec![0.0; self.x.len()];
        match cfg.method {
            Method::Cmd | Method::Qcmd => {
                for i in 0..self.x.len() {
                    let h = hat_h(i);
                    let u = self.x[i] - cfg.eta * g[i] / h;
                    out[i] = soft_threshold(u, cfg.lambda * cfg.eta / h);
                }
            }
            Method::Rda | Method::Qrda => {
                let t = (self.t + 1) as f64;
                for i in 0..self.x.len() {
                    let z = self.grad_sum[i] + g[i];
                    let truncated = (z.abs() / t - cfg.lambda).max(0.0);
                    out[i] = if truncated == 0.0 {
                        0.0
                    } else {
                        sign(-z) * t * cfg.eta / hat_h(i) * truncated
                    };
                }
            }
            Method::ProxGd => {
                for i in 0..self.x.len() {
                    out[i] = soft_threshold(self.x[i] - cfg.eta * g[i], cfg.lambda * cfg.eta);
                }
            }
        }
        Ok(out)
    }
}

/// Selection indicator: bit `d` is set iff `x_t[d] != 0` or `x_hat[d] != 0`
/// (exact comparison; soft-thresholding produces exact zeros).
pub fn build_indicator(x_t: &[f64], x_hat: &[f64]) -> Result<IndicatorBitmap> {
    if x_t.len() != x_hat.len() {
        return Err(Error::DimMismatch {
            expected: x_t.len(),
            got: x_hat.len(),
        });
    }
    Ok(IndicatorBitmap::from_fn(x_t.len(), |i| {
        x_t[i] != 0.0 || x_hat[i] != 0.0
    }))
}
