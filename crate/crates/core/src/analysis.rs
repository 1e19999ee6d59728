//! Representation analyses: correlation-matrix matching between student and
//! teacher class logits, singular-value flatness curves, and cross-seed
//! aggregation of run results.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{invalid, Result};
use crate::math::{correlation_matrix, singular_values, Matrix};
use crate::rng::RngStream;
use crate::teacher::TeacherCache;
use crate::training::{MlpModel, RunResult};

/// Anything that yields class logits for a sample: a live model, or a frozen
/// teacher cache keyed by sample id.
pub trait LogitSource {
    fn num_classes(&self) -> usize;
    fn logits(&self, id: u64, features: &[f64]) -> Result<Vec<f64>>;
}

impl LogitSource for MlpModel {
    fn num_classes(&self) -> usize {
        self.output_dim()
    }

    fn logits(&self, _id: u64, features: &[f64]) -> Result<Vec<f64>> {
        self.forward(features)
    }
}

impl LogitSource for TeacherCache {
    fn num_classes(&self) -> usize {
        TeacherCache::num_classes(self)
    }

    fn logits(&self, id: u64, _features: &[f64]) -> Result<Vec<f64>> {
        self.get(id)
            .map(|rep| rep.logits.clone())
            .ok_or_else(|| invalid(format!("cache has no entry for sample {id}")))
    }
}

/// Outcome of the correlation-matching analysis. The metric is the mean
/// absolute entrywise difference between the two correlation matrices, so it
/// lives in `[0, 2]` and is 0 exactly when they agree.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    pub sample_ids: Vec<u64>,
    pub teacher_corr: Matrix,
    pub student_corr: Matrix,
    pub metric: f64,
}

/// Draw `m` samples by seed, stack both parties' logits over them, and
/// compare the class-correlation matrices. Logits are used raw (no
/// temperature softening).
pub fn correlation_gap(
    student: &dyn LogitSource,
    teacher: &dyn LogitSource,
    dataset: &Dataset,
    eval_ids: &[u64],
    m: usize,
    seed: u64,
) -> Result<CorrelationReport> {
    if m < 2 {
        return Err(invalid("correlation analysis needs at least 2 samples"));
    }
    if m > eval_ids.len() {
        return Err(invalid(format!(
            "requested {m} samples but only {} are available",
            eval_ids.len()
        )));
    }
    if student.num_classes() != teacher.num_classes() {
        return Err(invalid("student and teacher class counts differ"));
    }
    let mut rng = RngStream::new(seed);
    let mut sample_ids = rng.choose_k(eval_ids, m);
    sample_ids.sort_unstable();

    let c = student.num_classes();
    let mut student_logits = Matrix::zeros(m, c);
    let mut teacher_logits = Matrix::zeros(m, c);
    for (r, &id) in sample_ids.iter().enumerate() {
        let x = dataset
            .features_of(id)
            .ok_or_else(|| invalid(format!("unknown sample id {id}")))?;
        student_logits.row_mut(r).copy_from_slice(&student.logits(id, x)?);
        teacher_logits.row_mut(r).copy_from_slice(&teacher.logits(id, x)?);
    }
    let student_corr = correlation_matrix(&student_logits)?;
    let teacher_corr = correlation_matrix(&teacher_logits)?;
    let metric = student_corr
        .data()
        .iter()
        .zip(teacher_corr.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / (c * c) as f64;
    Ok(CorrelationReport {
        sample_ids,
        teacher_corr,
        student_corr,
        metric,
    })
}

/// Sorted singular values of (centered) logit representations; a lower curve
/// indicates flatter representations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatnessCurve {
    /// Nonincreasing, nonnegative; length equals the class count (curves
    /// from classes with fewer samples than classes are zero-padded).
    pub values: Vec<f64>,
    pub per_class: bool,
    pub normalized: bool,
    pub classes_used: usize,
    pub classes_skipped: usize,
}

fn centered_singular_values(rows: &[Vec<f64>], c: usize, normalize: bool) -> Result<Vec<f64>> {
    let m = rows.len();
    let mut x = Matrix::from_rows(rows)?;
    let cols = x.cols();
    let mut means = vec![0.0; cols];
    for r in 0..m {
        for (mean, &v) in means.iter_mut().zip(x.row(r)) {
            *mean += v;
        }
    }
    for mean in &mut means {
        *mean /= m as f64;
    }
    for r in 0..m {
        for (v, &mean) in x.row_mut(r).iter_mut().zip(&means) {
            *v -= mean;
        }
    }
    let mut sv = singular_values(&x)?;
    sv.resize(c, 0.0);
    if normalize {
        let top = sv[0];
        if top > 0.0 {
            for v in &mut sv {
                *v /= top;
            }
        }
    }
    Ok(sv)
}

/// Flatness of a model's logit representations over the given samples.
///
/// `per_class`: center each class's logit rows, take singular values, and
/// average the curves across classes (classes with fewer than 2 samples are
/// skipped with a warning). Pooled mode runs one decomposition over all
/// centered logits. `normalize` divides each curve by its leading value.
pub fn flatness_curve(
    model: &dyn LogitSource,
    dataset: &Dataset,
    eval_ids: &[u64],
    per_class: bool,
    normalize: bool,
) -> Result<FlatnessCurve> {
    if eval_ids.len() < 2 {
        return Err(invalid("flatness analysis needs at least 2 samples"));
    }
    let c = model.num_classes();
    let mut by_class: Vec<Vec<Vec<f64>>> = vec![Vec::new(); dataset.num_classes];
    let mut all: Vec<Vec<f64>> = Vec::with_capacity(eval_ids.len());
    for &id in eval_ids {
        let x = dataset
            .features_of(id)
            .ok_or_else(|| invalid(format!("unknown sample id {id}")))?;
        let z = model.logits(id, x)?;
        let label = dataset
            .label_of(id)
            .ok_or_else(|| invalid(format!("unknown sample id {id}")))?;
        by_class[label].push(z.clone());
        all.push(z);
    }

    if !per_class {
        return Ok(FlatnessCurve {
            values: centered_singular_values(&all, c, normalize)?,
            per_class: false,
            normalized: normalize,
            classes_used: 0,
            classes_skipped: 0,
        });
    }

    let mut sum = vec![0.0; c];
    let mut used = 0usize;
    let mut skipped = 0usize;
    for (label, rows) in by_class.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        if rows.len() < 2 {
            log::warn!("flatness: class {label} has {} sample(s), skipped", rows.len());
            skipped += 1;
            continue;
        }
        let sv = centered_singular_values(rows, c, normalize)?;
        for (s, v) in sum.iter_mut().zip(&sv) {
            *s += v;
        }
        used += 1;
    }
    if used == 0 {
        return Err(invalid("flatness: no class has at least 2 samples"));
    }
    for s in &mut sum {
        *s /= used as f64;
    }
    Ok(FlatnessCurve {
        values: sum,
        per_class: true,
        normalized: normalize,
        classes_used: used,
        classes_skipped: skipped,
    })
}

/// Mean and sample standard deviation (divisor `n-1`; 0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One aggregate table row: test accuracy in percent across a run group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: String,
    pub budget: u64,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

/// Group results by (method, budget) and report mean/std test accuracy in
/// percent, sorted by group key.
pub fn aggregate_runs(results: &[RunResult]) -> Result<Vec<AggregateRow>> {
    if results.is_empty() {
        return Err(invalid("no run results to aggregate"));
    }
    let mut keys: Vec<(String, u64)> = results
        .iter()
        .map(|r| (r.method.name().to_string(), r.budget))
        .collect();
    keys.sort();
    keys.dedup();
    let mut rows = Vec::with_capacity(keys.len());
    for (method, budget) in keys {
        let values: Vec<f64> = results
            .iter()
            .filter(|r| r.method.name() == method && r.budget == budget)
            .map(|r| r.test_accuracy * 100.0)
            .collect();
        let (mean, std) = mean_std(&values);
        rows.push(AggregateRow {
            method,
            budget,
            count: values.len(),
            mean,
            std,
        });
    }
    Ok(rows)
}

/// `mean_{std}` cell, two decimals each — the table convention used
/// throughout the reports.
pub fn format_cell(mean: f64, std: f64) -> String {
    format!("{mean:.2}_{{{std:.2}}}")
}
