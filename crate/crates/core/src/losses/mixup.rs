//! Fixed-teacher mixup: input features and cached teacher probabilities are
//! recombined into new training examples without any further teacher calls.

use crate::error::{invalid, Result};

/// One mixed training example.
#[derive(Debug, Clone, PartialEq)]
pub struct MixupExample {
    /// `lambda * x_i + (1 - lambda) * x_j`.
    pub x_mix: Vec<f64>,
    /// Convex combination of the two teacher probability vectors.
    pub p_target: Vec<f64>,
    /// Convex combination of the two one-hot labels.
    pub y_soft: Vec<f64>,
}

/// Recombine a pair of samples. `p_i` and `p_j` are the teacher's (softened)
/// probabilities for the original datapoints; the student is trained with CE
/// against `y_soft` plus KL against `p_target`, so the teacher is never
/// re-queried on the mixed input.
#[allow(clippy::too_many_arguments)]
pub fn mixup_fixed_pair(
    x_i: &[f64],
    x_j: &[f64],
    p_i: &[f64],
    p_j: &[f64],
    y_i: usize,
    y_j: usize,
    lambda: f64,
    num_classes: usize,
) -> Result<MixupExample> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid(format!("mixup lambda {lambda} outside [0, 1]")));
    }
    if x_i.len() != x_j.len() {
        return Err(invalid("mixup feature dimension mismatch"));
    }
    if p_i.len() != num_classes || p_j.len() != num_classes {
        return Err(invalid("mixup probability dimension mismatch"));
    }
    if y_i >= num_classes || y_j >= num_classes {
        return Err(invalid("mixup label out of range"));
    }
    let mix = |a: f64, b: f64| lambda * a + (1.0 - lambda) * b;
    let x_mix = x_i.iter().zip(x_j).map(|(&a, &b)| mix(a, b)).collect();
    let p_target = p_i.iter().zip(p_j).map(|(&a, &b)| mix(a, b)).collect();
    let mut y_soft = vec![0.0; num_classes];
    y_soft[y_i] += lambda;
    y_soft[y_j] += 1.0 - lambda;
    Ok(MixupExample {
        x_mix,
        p_target,
        y_soft,
    })
}
