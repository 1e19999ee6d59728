//! Numerically stable scalar/vector/matrix primitives shared by every other
//! module. All functions are pure over immutable inputs and safe to call from
//! any number of threads.

mod jacobi;
mod matrix;

pub use jacobi::{singular_values, symmetric_eigenvalues};
pub use matrix::{dot, Matrix};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::RngStream;

/// Floor applied to the second argument of the KL log. Prevents -inf when a
/// softened probability underflows; far below any gradient signal of interest.
pub const KL_EPSILON: f64 = 1e-12;

/// Linear two-vector comparison family: `phi(a, b) = lambda1*a + lambda2*b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    /// `(lambda1, lambda2) = (1, -1)`.
    Difference,
    /// `(lambda1, lambda2) = (1, 1)`.
    Addition,
    /// `(alpha, 1 - alpha)` with `alpha ~ Beta(1,1)` drawn per use.
    Interpolation,
}

impl Comparison {
    /// Fix the weights for one use. Interpolation draws its alpha here so the
    /// same resolved weights can be applied to the student and teacher sides
    /// of a comparison and recorded in the run log.
    pub fn resolve(self, rng: &mut RngStream) -> ResolvedComparison {
        match self {
            Comparison::Difference => ResolvedComparison {
                lambda1: 1.0,
                lambda2: -1.0,
            },
            Comparison::Addition => ResolvedComparison {
                lambda1: 1.0,
                lambda2: 1.0,
            },
            Comparison::Interpolation => {
                // Beta(1,1) is Uniform(0,1).
                let alpha = rng.next_f64();
                ResolvedComparison {
                    lambda1: alpha,
                    lambda2: 1.0 - alpha,
                }
            }
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "difference" => Ok(Comparison::Difference),
            "addition" => Ok(Comparison::Addition),
            "interpolation" => Ok(Comparison::Interpolation),
            other => Err(invalid(format!(
                "unknown comparison '{other}' (expected difference|addition|interpolation)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Comparison::Difference => "difference",
            Comparison::Addition => "addition",
            Comparison::Interpolation => "interpolation",
        }
    }
}

/// Comparison weights fixed for one use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedComparison {
    pub lambda1: f64,
    pub lambda2: f64,
}

/// `softmax(z - max(z))`: a valid probability vector, invariant to adding any
/// constant to all coordinates, and overflow-free for any finite input.
pub fn stable_softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.len() < 2 {
        return Err(invalid("softmax needs at least 2 entries"));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(invalid("softmax input must be finite"));
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// Softmax of `z / t`. `t` must be positive.
pub fn stable_softmax_temp(z: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {t}")));
    }
    if t == 1.0 {
        return stable_softmax(z);
    }
    let scaled: Vec<f64> = z.iter().map(|v| v / t).collect();
    stable_softmax(&scaled)
}

/// `KL(p || q) = sum_c p_c ln(p_c / q_c)` in nats, with `0 ln(0/q) := 0` and
/// `q` floored at [`KL_EPSILON`] before the log.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(invalid(format!(
            "KL dimension mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    let mut sum = 0.0;
    for (&pc, &qc) in p.iter().zip(q) {
        if pc > 0.0 {
            sum += pc * (pc / qc.max(KL_EPSILON)).ln();
        }
    }
    Ok(sum)
}

/// `lambda1*a + lambda2*b` with the weights of `spec`.
pub fn compare(a: &[f64], b: &[f64], spec: &ResolvedComparison) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(invalid(format!(
            "compare dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| spec.lambda1 * x + spec.lambda2 * y)
        .collect())
}

/// Coordinate-wise arithmetic mean of a nonempty group of equal-length vectors.
pub fn centroid(group: &[&[f64]]) -> Result<Vec<f64>> {
    let first = group.first().ok_or_else(|| invalid("centroid of empty group"))?;
    let dim = first.len();
    if group.iter().any(|v| v.len() != dim) {
        return Err(invalid("centroid dimension mismatch"));
    }
    let mut out = vec![0.0; dim];
    for v in group {
        for (o, x) in out.iter_mut().zip(*v) {
            *o += x;
        }
    }
    let inv = 1.0 / group.len() as f64;
    for o in &mut out {
        *o *= inv;
    }
    Ok(out)
}

/// Pearson correlation in `[-1, 1]`. Returns 0 when either vector has zero
/// variance (constant vectors carry no correlation signal).
pub fn pearson(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(invalid(format!(
            "pearson dimension mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    if u.len() < 2 {
        return Err(invalid("pearson needs at least 2 entries"));
    }
    let m = u.len() as f64;
    let mu = u.iter().sum::<f64>() / m;
    let mv = v.iter().sum::<f64>() / m;
    let mut cov = 0.0;
    let mut su = 0.0;
    let mut sv = 0.0;
    for (&x, &y) in u.iter().zip(v) {
        let du = x - mu;
        let dv = y - mv;
        cov += du * dv;
        su += du * du;
        sv += dv * dv;
    }
    if su == 0.0 || sv == 0.0 {
        return Ok(0.0);
    }
    Ok((cov / (su.sqrt() * sv.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation matrix of the columns of an `m x c` sample matrix (rows are
/// samples). Symmetric with unit diagonal; zero-variance columns produce a
/// zero row/column with 1 on the diagonal.
pub fn correlation_matrix(x: &Matrix) -> Result<Matrix> {
    let (m, c) = (x.rows(), x.cols());
    if m < 2 {
        return Err(invalid("correlation_matrix needs at least 2 rows"));
    }
    // Column means and centered column norms.
    let mut means = vec![0.0; c];
    for r in 0..m {
        for (mean, &v) in means.iter_mut().zip(x.row(r)) {
            *mean += v;
        }
    }
    for mean in &mut means {
        *mean /= m as f64;
    }
    let mut centered = Matrix::zeros(m, c);
    for r in 0..m {
        let row = x.row(r);
        let out = centered.row_mut(r);
        for ((o, &v), &mean) in out.iter_mut().zip(row).zip(&means) {
            *o = v - mean;
        }
    }
    let mut norms = vec![0.0; c];
    for r in 0..m {
        for (n, &v) in norms.iter_mut().zip(centered.row(r)) {
            *n += v * v;
        }
    }
    let norms: Vec<f64> = norms.iter().map(|n| n.sqrt()).collect();

    let mut out = Matrix::zeros(c, c);
    for i in 0..c {
        out.set(i, i, 1.0);
        for j in (i + 1)..c {
            let v = if norms[i] == 0.0 || norms[j] == 0.0 {
                0.0
            } else {
                let mut cov = 0.0;
                for r in 0..m {
                    let row = centered.row(r);
                    cov += row[i] * row[j];
                }
                (cov / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    Ok(out)
}

/// Huber penalty: `0.5 x^2` for `|x| <= delta`, `delta(|x| - 0.5 delta)`
/// otherwise. Continuous and once-differentiable at the knots.
pub fn huber(x: f64, delta: f64) -> f64 {
    debug_assert!(delta > 0.0);
    let a = x.abs();
    if a <= delta {
        0.5 * x * x
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Derivative of [`huber`]: `x` inside the quadratic zone, `delta*sign(x)`
/// outside.
pub fn huber_grad(x: f64, delta: f64) -> f64 {
    let a = x.abs();
    if a <= delta {
        x
    } else {
        delta * x.signum()
    }
}
