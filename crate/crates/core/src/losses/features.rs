//! Intermediate-representation (white-box) losses: the hint regression loss
//! and the comparative loss lifted onto feature vectors.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::losses::{ckd_group_loss, CkdConfig, LossOutput};
use crate::math::{Matrix, ResolvedComparison};
use crate::rng::RngStream;

/// Trainable affine map from student-feature space to teacher-hint space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineRegressor {
    /// `out_dim x in_dim`, row-major.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl AffineRegressor {
    /// Fan-in-scaled Gaussian weights, zero biases.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut RngStream) -> Self {
        let scale = 1.0 / (in_dim as f64).sqrt();
        let mut weight = Matrix::zeros(out_dim, in_dim);
        for r in 0..out_dim {
            for v in weight.row_mut(r) {
                *v = scale * rng.normal();
            }
        }
        AffineRegressor {
            weight,
            bias: vec![0.0; out_dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut weight = Matrix::zeros(dim, dim);
        for i in 0..dim {
            weight.set(i, i, 1.0);
        }
        AffineRegressor {
            weight,
            bias: vec![0.0; dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim() {
            return Err(invalid(format!(
                "regressor input dim {} != {}",
                x.len(),
                self.in_dim()
            )));
        }
        Ok((0..self.out_dim())
            .map(|r| {
                self.weight
                    .row(r)
                    .iter()
                    .zip(x)
                    .map(|(&w, &v)| w * v)
                    .sum::<f64>()
                    + self.bias[r]
            })
            .collect())
    }

    /// Given `d out` (gradient at the regressor output), return
    /// `(d input, d weight, d bias)`; the weight block is row-major flat.
    pub fn backward(&self, x: &[f64], d_out: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut d_in = vec![0.0; self.in_dim()];
        let mut d_w = vec![0.0; self.out_dim() * self.in_dim()];
        for (r, &g) in d_out.iter().enumerate() {
            let row = self.weight.row(r);
            for (k, (&w, &xv)) in row.iter().zip(x).enumerate() {
                d_in[k] += w * g;
                d_w[r * self.in_dim() + k] = g * xv;
            }
        }
        (d_in, d_w, d_out.to_vec())
    }
}

/// Hint regression loss: `mean((regressor(f_hat) - hint)^2)`.
///
/// Gradient blocks: `[d f_hat, d weight (row-major flat), d bias]`.
pub fn fitnets_hint_loss(
    student_feat: &[f64],
    teacher_hint: &[f64],
    regressor: &AffineRegressor,
) -> Result<LossOutput> {
    let projected = regressor.forward(student_feat)?;
    if projected.len() != teacher_hint.len() {
        return Err(invalid(format!(
            "hint dimension mismatch after regression: {} vs {}",
            projected.len(),
            teacher_hint.len()
        )));
    }
    let d = projected.len() as f64;
    let mut value = 0.0;
    let mut d_out = vec![0.0; projected.len()];
    for (o, (&p, &h)) in d_out.iter_mut().zip(projected.iter().zip(teacher_hint)) {
        let e = p - h;
        value += e * e;
        *o = 2.0 * e / d;
    }
    value /= d;
    let (d_in, d_w, d_b) = regressor.backward(student_feat, &d_out);
    Ok(LossOutput {
        value,
        grads: vec![d_in, d_w, d_b],
    })
}

/// Comparative loss on intermediate features: the same pipeline as the logit
/// version, applied to feature groups of equal dimension (run the student
/// features through the hint regressor first when dimensions differ).
pub fn ckd_on_features(
    student_a: &[&[f64]],
    student_b: &[&[f64]],
    teacher_a: &[&[f64]],
    teacher_b: &[&[f64]],
    cmp: &ResolvedComparison,
    cfg: &CkdConfig,
) -> Result<LossOutput> {
    ckd_group_loss(student_a, student_b, teacher_a, teacher_b, cmp, cfg)
}
