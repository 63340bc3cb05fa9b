//! Loss functions: compactness (batch variance), descriptiveness
//! (cross-entropy), and their weighted composite.
//!
//! The compactness loss of a feature batch `X ∈ R^{n×k}` centers every row
//! on the mean of the *other* rows, `m_i = (1/(n−1))·Σ_{j≠i} x_j`, and
//! averages the squared norms:
//!
//! ```text
//! z_i = x_i − m_i          l_C = (1/(nk)) · Σ_i z_iᵀ z_i
//! ```
//!
//! Its gradient has the closed form
//!
//! ```text
//! ∂l_C/∂x_ij = 2/((n−1)·n·k) · [ n·z_ij − Σ_{i'} z_{i'j} ]
//! ```
//!
//! where the correction sum runs over the batch index within feature
//! column `j`. The loss is a scaled batch variance:
//! `l_C = β·σ̄²` with `β = n²/(k(n−1)²)` and `σ̄²` the mean squared
//! distance to the batch mean — both identities are enforced by tests
//! against independent oracles.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An `n×k` feature matrix destined for the compactness loss.
///
/// Requires `n ≥ 2`: the mean-of-the-rest is undefined for a single row,
/// and silently returning zero would mask data-pipeline bugs.
#[derive(Debug, Clone)]
pub struct FeatureBatch {
    data: Vec<f64>,
    n: usize,
    k: usize,
}

impl FeatureBatch {
    pub fn new(data: Vec<f64>, n: usize, k: usize) -> Result<FeatureBatch> {
        if n < 2 {
            return Err(Error::Invalid(format!(
                "compactness loss needs a batch of at least 2 rows, got {n}"
            )));
        }
        if data.len() != n * k || k == 0 {
            return Err(Error::Invalid(format!(
                "feature batch {n}x{k} does not match {} values",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("feature batch".into()));
        }
        Ok(FeatureBatch { data, n, k })
    }

    pub fn from_tensor(t: &Tensor) -> Result<FeatureBatch> {
        let s = t.shape();
        if s.len() != 2 {
            return Err(Error::Invalid(format!("feature batch must be 2-d, got {s:?}")));
        }
        FeatureBatch::new(t.data().to_vec(), s[0], s[1])
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn cols(&self) -> usize {
        self.k
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Leave-one-out residuals `z_ij = x_ij − m_ij`, via the column totals.
    fn residuals(&self) -> Vec<f64> {
        let (n, k) = (self.n, self.k);
        let mut col_sum = vec![0.0; k];
        for row in self.data.chunks_exact(k) {
            for (s, &v) in col_sum.iter_mut().zip(row) {
                *s += v;
            }
        }
        let scale = 1.0 / (n as f64 - 1.0);
        let mut z = Vec::with_capacity(n * k);
        for row in self.data.chunks_exact(k) {
            for (&s, &v) in col_sum.iter().zip(row) {
                let m = (s - v) * scale;
                z.push(v - m);
            }
        }
        z
    }
}

/// Compactness loss value: mean squared leave-one-out-centered distance.
pub fn compactness_forward(x: &FeatureBatch) -> f64 {
    let z = x.residuals();
    z.iter().map(|v| v * v).sum::<f64>() / (x.n * x.k) as f64
}

/// Analytic gradient of [`compactness_forward`], an `n×k` matrix.
pub fn compactness_backward(x: &FeatureBatch) -> Vec<f64> {
    let (n, k) = (x.n, x.k);
    let z = x.residuals();
    let mut z_col_sum = vec![0.0; k];
    for row in z.chunks_exact(k) {
        for (s, &v) in z_col_sum.iter_mut().zip(row) {
            *s += v;
        }
    }
    let coeff = 2.0 / ((n as f64 - 1.0) * n as f64 * k as f64);
    let nf = n as f64;
    z.chunks_exact(k)
        .flat_map(|row| {
            row.iter()
                .zip(&z_col_sum)
                .map(move |(&zv, &sv)| coeff * (nf * zv - sv))
        })
        .collect()
}

/// Mean cross-entropy of `n×c` logits against integer labels,
/// stabilized by per-row max subtraction.
pub fn cross_entropy(logits: &[f64], n: usize, c: usize, labels: &[usize]) -> Result<f64> {
    if logits.len() != n * c || labels.len() != n || n == 0 {
        return Err(Error::Invalid(format!(
            "cross_entropy wants {n}x{c} logits and {n} labels"
        )));
    }
    let mut total = 0.0;
    for (row, &label) in logits.chunks_exact(c).zip(labels) {
        if label >= c {
            return Err(Error::Invalid(format!(
                "label {label} out of range for {c} classes"
            )));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum: f64 = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total += log_sum - (row[label] - max);
    }
    Ok(total / n as f64)
}

/// Row-wise softmax of `n×c` logits (max-subtracted).
pub fn softmax(logits: &[f64], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(c) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / sum));
    }
    out
}

/// The three loss values of one training step and their weighting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    pub descriptiveness: f64,
    pub compactness: f64,
    pub composite: f64,
    pub lambda: f64,
}

/// Composite loss `l = l_D + λ·l_C`.
pub fn composite(l_d: f64, l_c: f64, lambda: f64) -> Result<LossBundle> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::Invalid(format!("lambda must be >= 0, got {lambda}")));
    }
    if l_d < 0.0 || l_c < 0.0 {
        return Err(Error::Invalid(format!(
            "loss terms must be nonnegative, got l_D={l_d}, l_C={l_c}"
        )));
    }
    Ok(LossBundle {
        descriptiveness: l_d,
        compactness: l_c,
        composite: l_d + lambda * l_c,
        lambda,
    })
}

// ---- tape-connected wrappers ----------------------------------------------

/// Compactness loss as a scalar tensor; backward applies the analytic
/// gradient formula above.
pub fn compactness_loss(features: &Tensor) -> Result<Tensor> {
    let batch = FeatureBatch::from_tensor(features)?;
    let value = compactness_forward(&batch);
    if !value.is_finite() {
        return Err(Error::NonFinite("compactness_loss".into()));
    }
    let x_t = features.clone();
    Ok(Tensor::scalar_op(
        "compactness_loss",
        vec![features.clone()],
        value,
        move || {
            Box::new(move |g: &[f64]| {
                let dx = x_t.tracks().then(|| {
                    let batch = FeatureBatch::from_tensor(&x_t)
                        .expect("validated in forward pass");
                    let mut grad = compactness_backward(&batch);
                    for v in &mut grad {
                        *v *= g[0];
                    }
                    grad
                });
                vec![dx]
            })
        },
    ))
}

/// Mean cross-entropy as a scalar tensor; backward is `(softmax − onehot)/n`.
pub fn cross_entropy_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::Invalid(format!("logits must be 2-d, got {s:?}")));
    }
    let (n, c) = (s[0], s[1]);
    let value = cross_entropy(logits.data(), n, c, labels)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("cross_entropy_loss".into()));
    }
    let x_t = logits.clone();
    let labels: Vec<usize> = labels.to_vec();
    Ok(Tensor::scalar_op(
        "cross_entropy_loss",
        vec![logits.clone()],
        value,
        move || {
            Box::new(move |g: &[f64]| {
                let dx = x_t.tracks().then(|| {
                    let mut probs = softmax(x_t.data(), c);
                    let inv_n = g[0] / n as f64;
                    for (i, &label) in labels.iter().enumerate() {
                        probs[i * c + label] -= 1.0;
                    }
                    for p in &mut probs {
                        *p *= inv_n;
                    }
                    probs
                });
                vec![dx]
            })
        },
    ))
}

#[cfg(test)]
mod tests;
