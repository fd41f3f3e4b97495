//! Ternary gradient quantizers.
//!
//! A quantized gradient is `scale * codes` with `codes[i] ∈ {-1, 0, +1}` and
//! a single non-negative scaler. Three quantizers are provided:
//!
//! * [`stochastic_ternary`] — unbiased random ternarization with the max-norm
//!   scaler (TernGrad-style); the expectation of the dense result equals the
//!   input exactly.
//! * [`threshold_exact`] — deterministic ternarization that minimizes the
//!   squared reconstruction error over all `scale * ternary` representations
//!   by scanning magnitude thresholds in O(d log d).
//! * [`threshold_approx`] — O(d) variant using the Gaussian-motivated
//!   threshold `0.75 * mean(|v_i|)`.
//!
//! [`optimal_ternary_oracle`] is an exponential brute-force reference used to
//! certify the exact solver on small inputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A ternary-quantized gradient: one scaler plus per-coordinate codes.
///
/// Invariants: `scale >= 0` and finite; every code is -1, 0, or +1; a zero
/// scale implies all-zero codes. The dense value of coordinate `i` is
/// `scale * codes[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TernaryGradient {
    scale: f64,
    codes: Vec<i8>,
}

impl TernaryGradient {
    /// Builds a ternary gradient, validating the type invariants.
    pub fn new(scale: f64, codes: Vec<i8>) -> Result<Self> {
        if codes.is_empty() {
            return Err(Error::EmptyInput);
        }
        if !scale.is_finite() || scale < 0.0 {
            return Err(Error::InvalidScale(scale));
        }
        if codes.iter().any(|&c| !(-1..=1).contains(&c)) {
            return Err(Error::CorruptCode);
        }
        if scale == 0.0 && codes.iter().any(|&c| c != 0) {
            return Err(Error::CorruptCode);
        }
        Ok(Self { scale, codes })
    }

    /// The all-zero gradient of the given dimension (scale 0, all codes 0).
    pub fn zero(dim: usize) -> Self {
        Self {
            scale: 0.0,
            codes: vec![0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.codes.len()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    /// Dense value of coordinate `i`.
    pub fn value(&self, i: usize) -> f64 {
        self.scale * f64::from(self.codes[i])
    }

    /// Materializes the dense vector `scale * codes`.
    pub fn dense(&self) -> Vec<f64> {
        self.codes
            .iter()
            .map(|&c| self.scale * f64::from(c))
            .collect()
    }

    /// Number of nonzero codes.
    pub fn nnz(&self) -> usize {
        self.codes.iter().filter(|&&c| c != 0).count()
    }
}

/// Selects which quantizer a run applies (at both the worker and server
/// stages). `Identity` is the non-quantized passthrough used for the 32-bit
/// full-precision baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantizerKind {
    TernaryStochastic,
    ThresholdExact,
    ThresholdApprox,
    Identity,
}

impl QuantizerKind {
    pub fn is_identity(self) -> bool {
        self == QuantizerKind::Identity
    }

    /// Applies the quantizer. The random source is only consumed by
    /// `TernaryStochastic`; `Identity` has no ternary form and is an error
    /// here (callers handle the passthrough themselves).
    pub fn quantize<R: Rng>(self, v: &[f64], rng: &mut R) -> Result<TernaryGradient> {
        match self {
            QuantizerKind::TernaryStochastic => stochastic_ternary(v, rng),
            QuantizerKind::ThresholdExact => threshold_exact(v),
            QuantizerKind::ThresholdApprox => threshold_approx(v),
            QuantizerKind::Identity => Err(Error::InvalidConfig(
                "identity quantizer has no ternary form".into(),
            )),
        }
    }
}

fn ensure_input(v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::EmptyInput);
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    Ok(())
}

fn sign_code(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Unbiased stochastic ternarization with scale `max_i |v_i|`.
///
/// Each code keeps `sign(v_i)` with probability `|v_i| / scale`
/// independently, so the expectation of the dense result is exactly `v`.
/// The zero vector maps to the zero gradient.
pub fn stochastic_ternary<R: Rng>(v: &[f64], rng: &mut R) -> Result<TernaryGradient> {
    ensure_input(v)?;
    let scale = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return Ok(TernaryGradient::zero(v.len()));
    }
    let codes = v
        .iter()
        .map(|&x| {
            let p = x.abs() / scale;
            if rng.random::<f64>() < p {
                sign_code(x)
            } else {
                0
            }
        })
        .collect();
    TernaryGradient::new(scale, codes)
}

/// Deterministic threshold ternarization with the optimal threshold and
/// scaler.
///
/// Sorts the nonzero magnitudes and scans every tie-closed prefix `I` as a
/// candidate support, maximizing `(Σ_{i∈I} |v_i|)² / |I|` via prefix sums;
/// the winning support gets codes `sign(v_i)` and scale `mean_{i∈I} |v_i|`.
/// Ties in the objective resolve toward the larger support (smaller
/// threshold). The zero vector maps to the zero gradient.
pub fn threshold_exact(v: &[f64]) -> Result<TernaryGradient> {
    ensure_input(v)?;
    let mut order: Vec<usize> = (0..v.len()).filter(|&i| v[i] != 0.0).collect();
    if order.is_empty() {
        return Ok(TernaryGradient::zero(v.len()));
    }
    order.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()));

    // Candidate supports are prefixes that do not split a run of equal
    // magnitudes (a threshold cannot separate ties).
    let m = order.len();
    let mut best_take = 0usize;
    let mut best_objective = f64::NEG_INFINITY;
    let mut prefix = 0.0_f64;
    for (j, &idx) in order.iter().enumerate() {
        prefix += v[idx].abs();
        let boundary = j + 1 == m || v[order[j + 1]].abs() < v[idx].abs();
        if !boundary {
            continue;
        }
        let take = j + 1;
        let objective = prefix * prefix / take as f64;
        if objective >= best_objective {
            best_objective = objective;
            best_take = take;
        }
    }

    let selected = &order[..best_take];
    let scale = selected.iter().map(|&i| v[i].abs()).sum::<f64>() / best_take as f64;
    let mut codes = vec![0i8; v.len()];
    for &i in selected {
        codes[i] = sign_code(v[i]);
    }
    TernaryGradient::new(scale, codes)
}

/// O(d) threshold ternarization using the approximation
/// `Δ = 0.75 * mean(|v_i|)` (mean over all coordinates).
///
/// Coordinates with `|v_i| > Δ` keep their sign; the scale is the mean
/// magnitude over that support. Degenerate inputs where nothing clears the
/// threshold map to the zero gradient.
pub fn threshold_approx(v: &[f64]) -> Result<TernaryGradient> {
    ensure_input(v)?;
    let threshold = 0.75 * v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64;
    let mut selected_sum = 0.0_f64;
    let mut selected_count = 0usize;
    for &x in v {
        if x.abs() > threshold {
            selected_sum += x.abs();
            selected_count += 1;
        }
    }
    if selected_count == 0 {
        return Ok(TernaryGradient::zero(v.len()));
    }
    let scale = selected_sum / selected_count as f64;
    let codes = v
        .iter()
        .map(|&x| if x.abs() > threshold { sign_code(x) } else { 0 })
        .collect();
    TernaryGradient::new(scale, codes)
}

/// Squared reconstruction error `‖v - scale*codes‖₂²`.
pub fn quantization_error(v: &[f64], q: &TernaryGradient) -> Result<f64> {
    if v.len() != q.dim() {
        return Err(Error::DimMismatch {
            expected: q.dim(),
            got: v.len(),
        });
    }
    Ok(v.iter()
        .zip(q.codes())
        .map(|(&x, &c)| {
            let r = x - q.scale() * f64::from(c);
            r * r
        })
        .sum())
}

/// Globally optimal ternary representation found by brute force.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub scale: f64,
    pub codes: Vec<i8>,
    pub error: f64,
}

const ORACLE_MAX_DIM: usize = 20;

/// Enumerates all `3^dim` ternary code vectors and, for each, the closed-form
/// least-squares scale `max(0, Σ_{codes≠0} codes_i * v_i / #nonzero)`;
/// returns the global minimizer of `‖v - scale*codes‖₂²`.
///
/// Test-and-verification plumbing only: refuses `dim > 20`.
pub fn optimal_ternary_oracle(v: &[f64]) -> Result<OracleResult> {
    ensure_input(v)?;
    if v.len() > ORACLE_MAX_DIM {
        return Err(Error::OracleDimTooLarge {
            dim: v.len(),
            max: ORACLE_MAX_DIM,
        });
    }

    // DFS over code vectors with the running correlation P = Σ c_i v_i and
    // support size n. For fixed codes the best scale is max(0, P/n), giving
    // error ‖v‖² - P²/n when P > 0 and ‖v‖² otherwise.
    let norm_sq: f64 = v.iter().map(|x| x * x).sum();
    let mut best = OracleResult {
        scale: 0.0,
        codes: vec![0; v.len()],
        error: norm_sq,
    };
    let mut codes = vec![0i8; v.len()];
    search(v, 0, 0.0, 0, norm_sq, &mut codes, &mut best);

    // Report the error through the direct sum so it is comparable with
    // `quantization_error` without cancellation artifacts.
    let q = TernaryGradient::new(best.scale, best.codes.clone())?;
    best.error = quantization_error(v, &q)?;
    Ok(best)
}

fn search(
    v: &[f64],
    depth: usize,
    corr: f64,
    nnz: usize,
    norm_sq: f64,
    codes: &mut Vec<i8>,
    best: &mut OracleResult,
) {
    if depth == v.len() {
        let (scale, error) = if nnz > 0 && corr > 0.0 {
            (corr / nnz as f64, norm_sq - corr * corr / nnz as f64)
        } else {
            (0.0, norm_sq)
        };
        if error < best.error {
            best.error = error;
            best.scale = scale;
            best.codes.copy_from_slice(codes);
        }
        return;
    }
    for c in [0i8, 1, -1] {
        codes[depth] = c;
        let (corr2, nnz2) = if c == 0 {
            (corr, nnz)
        } else {
            (corr + f64::from(c) * v[depth], nnz + 1)
        };
        search(v, depth + 1, corr2, nnz2, norm_sq, codes, best);
    }
    codes[depth] = 0;
}
