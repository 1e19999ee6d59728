//! Distillation objectives. Every loss returns a [`LossOutput`]: a scalar
//! value plus the analytic gradient with respect to the student-side inputs,
//! laid out as one block per differentiable input. Teacher-side quantities
//! are always constants; no gradient ever flows into cached teacher
//! representations.

mod features;
mod mixup;
mod relational;

pub use features::{ckd_on_features, fitnets_hint_loss, AffineRegressor};
pub use mixup::{mixup_fixed_pair, MixupExample};
pub use relational::{dist_loss, rkd_loss, RkdConfig};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::math::{self, ResolvedComparison};

/// Scalar loss and its gradient blocks. Block `i` matches the shape of the
/// `i`-th differentiable input of the loss that produced it (for batch losses,
/// one block per batch row).
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grads: Vec<Vec<f64>>,
}

/// Which way the comparative KL divergence points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(student || teacher)` — the literal form of the comparative loss.
    StudentFirst,
    /// `KL(teacher || student)` — the conventional KD direction.
    TeacherFirst,
}

/// Comparative-loss configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CkdConfig {
    /// Group size (total samples per comparison). The loss itself reads the
    /// group sizes from its arguments; `k` drives the sampler.
    pub k: usize,
    pub comparison: math::Comparison,
    /// Weight of the comparative term in the total loss.
    pub beta: f64,
    pub kl_direction: KlDirection,
    /// Softmax temperature for the comparative distributions. The loss as
    /// published uses none, so the default is 1.
    pub temperature: f64,
}

impl Default for CkdConfig {
    fn default() -> Self {
        CkdConfig {
            k: 3,
            comparison: math::Comparison::Difference,
            beta: 1.0,
            kl_direction: KlDirection::StudentFirst,
            temperature: 1.0,
        }
    }
}

/// Classic-KD configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub temperature: f64,
    /// Multiply the loss by T^2 (the usual gradient-magnitude correction).
    pub scale_by_t2: bool,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            temperature: 4.0,
            scale_by_t2: true,
        }
    }
}

fn check_same_dim(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(invalid(format!(
            "{what}: dimension mismatch {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// `max(z) + ln sum exp(z - max(z))`.
fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Cross-entropy against a hard label: `-ln softmax(z)[y]`.
/// Gradient: `softmax(z) - onehot(y)`.
pub fn ce_loss(student_logits: &[f64], label: usize) -> Result<LossOutput> {
    let c = student_logits.len();
    if label >= c {
        return Err(invalid(format!("label {label} out of range for {c} classes")));
    }
    let value = log_sum_exp(student_logits) - student_logits[label];
    let mut grad = math::stable_softmax(student_logits)?;
    grad[label] -= 1.0;
    Ok(LossOutput {
        value,
        grads: vec![grad],
    })
}

/// Cross-entropy against a soft target distribution:
/// `-sum_c t_c ln softmax(z)_c`. Gradient: `softmax(z) - t`.
pub fn ce_soft_loss(student_logits: &[f64], target: &[f64]) -> Result<LossOutput> {
    check_same_dim(student_logits, target, "ce_soft_loss")?;
    let lse = log_sum_exp(student_logits);
    let value = target
        .iter()
        .zip(student_logits)
        .map(|(&t, &z)| t * (lse - z))
        .sum();
    let p = math::stable_softmax(student_logits)?;
    let grad = p.iter().zip(target).map(|(&pc, &tc)| pc - tc).collect();
    Ok(LossOutput {
        value,
        grads: vec![grad],
    })
}

/// Hinton KD: `T^2 * KL(softmax(z/T) || softmax(z_hat/T))` (the `T^2` factor
/// is dropped when `scale_by_t2` is off). The teacher term is constant, so
/// the gradient flows only through the student logits.
pub fn kd_loss(student_logits: &[f64], teacher_logits: &[f64], cfg: &KdConfig) -> Result<LossOutput> {
    check_same_dim(student_logits, teacher_logits, "kd_loss")?;
    let target = math::stable_softmax_temp(teacher_logits, cfg.temperature)?;
    kd_loss_soft_target(student_logits, &target, cfg)
}

/// KD against a target that is already a probability vector (mixup's
/// recombined teacher probabilities): `scale * KL(target || softmax(z/T))`,
/// gradient through the student only.
pub fn kd_loss_soft_target(
    student_logits: &[f64],
    target: &[f64],
    cfg: &KdConfig,
) -> Result<LossOutput> {
    check_same_dim(student_logits, target, "kd_loss_soft_target")?;
    let t = cfg.temperature;
    let p_student = math::stable_softmax_temp(student_logits, t)?;
    let scale = if cfg.scale_by_t2 { t * t } else { 1.0 };
    let value = scale * math::kl_divergence(target, &p_student)?;
    let grad = p_student
        .iter()
        .zip(target)
        .map(|(&ps, &pt)| scale / t * (ps - pt))
        .collect();
    Ok(LossOutput {
        value,
        grads: vec![grad],
    })
}

/// Comparative loss over two groups: the comparison of the student's group
/// centroids is pushed through a softmax and matched to the teacher's via KL.
///
/// Gradient blocks are ordered `[A members..., B members...]`. Group sizes are
/// read from the argument slices; `cmp` carries the comparison weights fixed
/// for this use (so interpolation applies the same draw to both parties).
pub fn ckd_group_loss(
    student_a: &[&[f64]],
    student_b: &[&[f64]],
    teacher_a: &[&[f64]],
    teacher_b: &[&[f64]],
    cmp: &ResolvedComparison,
    cfg: &CkdConfig,
) -> Result<LossOutput> {
    if student_a.is_empty() || student_b.is_empty() {
        return Err(invalid("ckd_group_loss: empty group"));
    }
    if student_a.len() != teacher_a.len() || student_b.len() != teacher_b.len() {
        return Err(invalid("ckd_group_loss: student/teacher group sizes differ"));
    }
    if !(cfg.temperature > 0.0) {
        return Err(invalid("ckd_group_loss: temperature must be positive"));
    }

    let centroid_sa = math::centroid(student_a)?;
    let centroid_sb = math::centroid(student_b)?;
    let centroid_ta = math::centroid(teacher_a)?;
    let centroid_tb = math::centroid(teacher_b)?;
    check_same_dim(&centroid_sa, &centroid_sb, "ckd_group_loss")?;
    check_same_dim(&centroid_sa, &centroid_ta, "ckd_group_loss")?;
    check_same_dim(&centroid_ta, &centroid_tb, "ckd_group_loss")?;

    let u_student = math::compare(&centroid_sa, &centroid_sb, cmp)?;
    let u_teacher = math::compare(&centroid_ta, &centroid_tb, cmp)?;
    let t = cfg.temperature;
    let p_student = math::stable_softmax_temp(&u_student, t)?;
    let p_teacher = math::stable_softmax_temp(&u_teacher, t)?;

    // Gradient of the KL with respect to the student comparison vector.
    let c = p_student.len();
    let (value, mut g_u) = match cfg.kl_direction {
        KlDirection::StudentFirst => {
            let value = math::kl_divergence(&p_student, &p_teacher)?;
            let mut g = vec![0.0; c];
            for d in 0..c {
                if p_student[d] > 0.0 {
                    let r = (p_student[d] / p_teacher[d].max(math::KL_EPSILON)).ln();
                    g[d] = p_student[d] * (r - value);
                }
            }
            (value, g)
        }
        KlDirection::TeacherFirst => {
            let value = math::kl_divergence(&p_teacher, &p_student)?;
            let g = p_student
                .iter()
                .zip(&p_teacher)
                .map(|(&ps, &pt)| ps - pt)
                .collect();
            (value, g)
        }
    };
    for g in &mut g_u {
        *g /= t;
    }

    // Chain through the centroids: every member of A sees lambda1/|A| of the
    // comparison gradient, every member of B sees lambda2/|B|.
    let scale_a = cmp.lambda1 / student_a.len() as f64;
    let scale_b = cmp.lambda2 / student_b.len() as f64;
    let mut grads = Vec::with_capacity(student_a.len() + student_b.len());
    for _ in 0..student_a.len() {
        grads.push(g_u.iter().map(|&g| scale_a * g).collect());
    }
    for _ in 0..student_b.len() {
        grads.push(g_u.iter().map(|&g| scale_b * g).collect());
    }
    Ok(LossOutput { value, grads })
}

/// Two-sample comparative loss: [`ckd_group_loss`] with singleton groups, so
/// the group path reduces to it bitwise. Gradient blocks: `[i, j]`.
pub fn ckd_pair_loss(
    student_i: &[f64],
    student_j: &[f64],
    teacher_i: &[f64],
    teacher_j: &[f64],
    cmp: &ResolvedComparison,
    cfg: &CkdConfig,
) -> Result<LossOutput> {
    ckd_group_loss(
        &[student_i],
        &[student_j],
        &[teacher_i],
        &[teacher_j],
        cmp,
        cfg,
    )
}

/// Weighted sum of loss parts. All parts must carry gradients over the same
/// inputs (identical block shapes); the combined gradient is the weighted sum
/// per block.
pub fn total_loss(parts: &[(LossOutput, f64)]) -> Result<LossOutput> {
    let (first, _) = parts
        .first()
        .ok_or_else(|| invalid("total_loss: no parts"))?;
    if parts.iter().any(|(_, w)| *w < 0.0) {
        return Err(invalid("total_loss: negative weight"));
    }
    let shapes: Vec<usize> = first.grads.iter().map(|g| g.len()).collect();
    let mut value = 0.0;
    let mut grads: Vec<Vec<f64>> = shapes.iter().map(|&n| vec![0.0; n]).collect();
    for (part, weight) in parts {
        if part.grads.len() != shapes.len()
            || part
                .grads
                .iter()
                .zip(&shapes)
                .any(|(g, &n)| g.len() != n)
        {
            return Err(invalid(
                "total_loss: gradient shape mismatch across parts sharing inputs",
            ));
        }
        value += weight * part.value;
        for (acc, g) in grads.iter_mut().zip(&part.grads) {
            for (a, &v) in acc.iter_mut().zip(g) {
                *a += weight * v;
            }
        }
    }
    Ok(LossOutput { value, grads })
}
