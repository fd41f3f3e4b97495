//! Sparse datasets and the l1-regularized logistic regression objective.
//!
//! Examples are sorted (index, value) pairs with labels in {-1, +1}. LIBSVM
//! text files (1-based indices) are read and written; the synthetic
//! generator produces linearly separable sparse-ground-truth problems for
//! desk-scale experiments. Gradients are dense vectors; the l1 term is the
//! optimizer's job and is never folded into the gradient.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::{Error, Result};

/// One labelled sparse feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseExample {
    features: Vec<(u32, f64)>,
    label: i8,
}

impl SparseExample {
    /// Builds an example; indices must be strictly increasing and the label
    /// must be -1 or +1.
    pub fn new(features: Vec<(u32, f64)>, label: i8) -> Result<Self> {
        if label != -1 && label != 1 {
            return Err(Error::InvalidConfig(format!(
                "label must be ±1, got {label}"
            )));
        }
        if features.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::InvalidConfig(
                "feature indices must be strictly increasing".into(),
            ));
        }
        Ok(Self { features, label })
    }

    pub fn features(&self) -> &[(u32, f64)] {
        &self.features
    }

    /// +1 or -1.
    pub fn label(&self) -> f64 {
        f64::from(self.label)
    }

    /// Sparse dot product against a dense vector.
    pub fn dot(&self, x: &[f64]) -> f64 {
        self.features.iter().map(|&(i, v)| x[i as usize] * v).sum()
    }

    fn max_index(&self) -> Option<u32> {
        self.features.last().map(|&(i, _)| i)
    }
}

/// An immutable labelled dataset with a fixed feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<SparseExample>,
    dim: usize,
    name: String,
}

impl Dataset {
    /// Wraps examples; `dim` must cover every feature index.
    pub fn new(examples: Vec<SparseExample>, dim: usize, name: impl Into<String>) -> Result<Self> {
        let needed = examples
            .iter()
            .filter_map(SparseExample::max_index)
            .max()
            .map_or(0, |m| m as usize + 1);
        if dim < needed {
            return Err(Error::InvalidConfig(format!(
                "dim {dim} smaller than max feature index + 1 = {needed}"
            )));
        }
        Ok(Self {
            examples,
            dim,
            name: name.into(),
        })
    }

    pub fn examples(&self) -> &[SparseExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Splits off the first `n` examples into one dataset and the rest into
    /// another (same dimension; used for train/held-out splits that must
    /// share a generating distribution).
    pub fn split_at(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(Error::InvalidConfig(format!(
                "split point {n} outside 1..{}",
                self.len()
            )));
        }
        let head = Dataset {
            examples: self.examples[..n].to_vec(),
            dim: self.dim,
            name: self.name.clone(),
        };
        let tail = Dataset {
            examples: self.examples[n..].to_vec(),
            dim: self.dim,
            name: format!("{}-heldout", self.name),
        };
        Ok((head, tail))
    }

    /// Contiguous equal splits by sample index; remainder samples go to the
    /// last worker.
    pub fn shards(&self, workers: usize) -> Vec<std::ops::Range<usize>> {
        let base = self.len() / workers;
        (0..workers)
            .map(|m| {
                let start = m * base;
                let end = if m + 1 == workers {
                    self.len()
                } else {
                    start + base
                };
                start..end
            })
            .collect()
    }
}

fn parse_label(tok: &str, line: usize) -> Result<i8> {
    let v: f64 = tok.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("bad label {tok:?}"),
    })?;
    // 0/1-labelled files map 0 to -1.
    Ok(if v > 0.0 { 1 } else { -1 })
}

/// Reads a LIBSVM text file (`label index:value ...`, 1-based indices).
///
/// Labels are mapped to {-1, +1} with non-positive values (including 0)
/// becoming -1; indices are shifted to 0-based. Malformed lines are rejected
/// with their line number.
pub fn load_libsvm(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let mut examples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut toks = line.split_whitespace();
        let label = parse_label(toks.next().unwrap(), lineno)?;
        let mut features = Vec::new();
        let mut prev: Option<u32> = None;
        for tok in toks {
            let (idx_s, val_s) = tok.split_once(':').ok_or_else(|| Error::Parse {
                line: lineno,
                msg: format!("expected index:value, got {tok:?}"),
            })?;
            let idx1: u32 = idx_s.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad index {idx_s:?}"),
            })?;
            if idx1 == 0 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: "LIBSVM indices are 1-based".into(),
                });
            }
            let val: f64 = val_s.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad value {val_s:?}"),
            })?;
            let idx = idx1 - 1;
            if prev.is_some_and(|p| idx <= p) {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("non-monotone feature index {idx1}"),
                });
            }
            prev = Some(idx);
            features.push((idx, val));
        }
        examples.push(SparseExample { features, label });
    }
    if examples.is_empty() {
        return Err(Error::EmptyInput);
    }
    let dim = examples
        .iter()
        .filter_map(SparseExample::max_index)
        .max()
        .map_or(1, |m| m as usize + 1);
    Dataset::new(examples, dim, name)
}

/// Writes a dataset in LIBSVM text format (1-based indices). Feature values
/// use the shortest round-trip decimal form, so write-then-load reproduces
/// the dataset exactly.
pub fn save_libsvm(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for ex in &ds.examples {
        out.push_str(if ex.label > 0 { "+1" } else { "-1" });
        for &(i, v) in &ex.features {
            let _ = write!(out, " {}:{}", i + 1, v);
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Generates a sparse binary classification problem with a planted sparse
/// separator.
///
/// `x_true` has `k_true` nonzero coordinates drawn from {-1, +1}; features
/// are standard-normal with 10% density; labels are
/// `sign(<x_true, z> + noise * eps)` with `sign(0)` taken as +1.
/// Deterministic for a fixed seed.
pub fn synth_sparse_dataset(
    n: usize,
    d: usize,
    k_true: usize,
    noise: f64,
    seed: u64,
) -> Result<(Dataset, Vec<f64>)> {
    if n == 0 || d == 0 || k_true > d {
        return Err(Error::InvalidConfig(format!(
            "invalid synthetic sizes n={n} d={d} k_true={k_true}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x_true = vec![0.0; d];
    let mut support = sample_indices(&mut rng, d, k_true).into_vec();
    support.sort_unstable();
    for i in support {
        x_true[i] = if rng.random::<bool>() { 1.0 } else { -1.0 };
    }

    let mut examples = Vec::with_capacity(n);
    for _ in 0..n {
        let mut features = Vec::new();
        for i in 0..d {
            if rng.random::<f64>() < 0.1 {
                let v: f64 = rng.sample(StandardNormal);
                features.push((i as u32, v));
            }
        }
        let ex = SparseExample { features, label: 1 };
        let eps: f64 = rng.sample(StandardNormal);
        let margin = ex.dot(&x_true) + noise * eps;
        let label = if margin < 0.0 { -1 } else { 1 };
        examples.push(SparseExample { label, ..ex });
    }
    let name = format!("synth-n{n}-d{d}-k{k_true}");
    Ok((Dataset::new(examples, d, name)?, x_true))
}

fn log1p_exp(m: f64) -> f64 {
    // ln(1 + e^m), stable for large |m|.
    if m > 0.0 {
        m + (-m).exp().ln_1p()
    } else {
        m.exp().ln_1p()
    }
}

fn sigmoid(m: f64) -> f64 {
    if m >= 0.0 {
        1.0 / (1.0 + (-m).exp())
    } else {
        let e = m.exp();
        e / (1.0 + e)
    }
}

/// Mean logistic loss over a batch: `mean log(1 + exp(-y <x, z>))`.
pub fn logistic_loss(x: &[f64], batch: &[&SparseExample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut loss = 0.0;
    for ex in batch {
        loss += log1p_exp(-ex.label() * ex.dot(x));
    }
    Ok(loss / batch.len() as f64)
}

/// Mean logistic loss and its dense gradient over a batch.
///
/// The gradient is `mean -y * sigmoid(-y <x, z>) * z`; the l1 regularizer is
/// handled by the optimizer and never added here.
pub fn logistic_loss_grad(x: &[f64], batch: &[&SparseExample]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput);
    }
    let inv = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; x.len()];
    for ex in batch {
        let y = ex.label();
        let m = y * ex.dot(x);
        loss += log1p_exp(-m);
        let coeff = -y * sigmoid(-m) * inv;
        for &(i, v) in ex.features() {
            grad[i as usize] += coeff * v;
        }
    }
    Ok((loss * inv, grad))
}

/// Percentage of test examples with `sign(<x, z>) == y`; a zero margin
/// counts as predicting +1.
pub fn evaluate(x: &[f64], test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyInput);
    }
    let correct_for = |ex: &SparseExample| -> usize {
        let pred = if ex.dot(x) >= 0.0 { 1.0 } else { -1.0 };
        usize::from(pred == ex.label())
    };
    #[cfg(feature = "parallel")]
    let correct: usize = test.examples.par_iter().map(correct_for).sum();
    #[cfg(not(feature = "parallel"))]
    let correct: usize = test.examples.iter().map(correct_for).sum();
    Ok(100.0 * correct as f64 / test.len() as f64)
}
