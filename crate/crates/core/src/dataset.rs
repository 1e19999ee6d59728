//! Feature-vector datasets: a seeded synthetic Gaussian-mixture generator and
//! a plain CSV loader. Every sample carries a stable id, a label, and a
//! partition tag separating the training pool from the held-out test set.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::math::Matrix;
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    /// Training pool; budgeted subsets and train/val splits are drawn here.
    Pool,
    /// Held-out evaluation partition; never seen by any oracle or optimizer.
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub num_classes: usize,
    pub ids: Vec<u64>,
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub partitions: Vec<Partition>,
}

/// Synthetic-generator parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    /// Samples per class across pool and test together.
    pub per_class: usize,
    /// Standard deviation of the isotropic noise around each class mean.
    pub noise: f64,
    /// Pairwise distance between class means.
    pub separation: f64,
    /// Fraction of samples held out as the test partition.
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 20,
            dim: 32,
            per_class: 1_000,
            noise: 1.0,
            separation: 3.0,
            test_fraction: 0.2,
            seed: 1,
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn pool_ids(&self) -> Vec<u64> {
        self.ids
            .iter()
            .zip(&self.partitions)
            .filter(|(_, p)| **p == Partition::Pool)
            .map(|(id, _)| *id)
            .collect()
    }

    pub fn test_ids(&self) -> Vec<u64> {
        self.ids
            .iter()
            .zip(&self.partitions)
            .filter(|(_, p)| **p == Partition::Test)
            .map(|(id, _)| *id)
            .collect()
    }

    /// Row index of a sample id. Ids are dense (0..len) for generated data
    /// but arbitrary for loaded CSVs, so this resolves through a search.
    pub fn index_of(&self, id: u64) -> Option<usize> {
        // ids are sorted ascending by construction in both generators
        self.ids.binary_search(&id).ok()
    }

    pub fn features_of(&self, id: u64) -> Option<&[f64]> {
        self.index_of(id).map(|i| self.features.row(i))
    }

    pub fn label_of(&self, id: u64) -> Option<usize> {
        self.index_of(id).map(|i| self.labels[i])
    }

    /// Stack the feature rows for a list of ids.
    pub fn feature_batch(&self, ids: &[u64]) -> Result<Matrix> {
        let mut out = Matrix::zeros(ids.len(), self.dim);
        for (r, &id) in ids.iter().enumerate() {
            let row = self
                .features_of(id)
                .ok_or_else(|| invalid(format!("unknown sample id {id}")))?;
            out.row_mut(r).copy_from_slice(row);
        }
        Ok(out)
    }

    pub fn label_batch(&self, ids: &[u64]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|&id| {
                self.label_of(id)
                    .ok_or_else(|| invalid(format!("unknown sample id {id}")))
            })
            .collect()
    }
}

/// Class means at the vertices of a regular simplex with the requested
/// pairwise distance, embedded in `dim` dimensions and rotated by a seeded
/// chain of Givens rotations so different seeds give different geometry.
fn simplex_means(classes: usize, dim: usize, separation: f64, rng: &mut RngStream) -> Result<Matrix> {
    if dim + 1 < classes {
        return Err(invalid(format!(
            "dim {dim} too small for {classes} separated classes (need dim >= classes - 1)"
        )));
    }
    // Centered standard-basis simplex in R^classes: rows e_c - 1/classes.
    let c = classes;
    let mut centered = Matrix::zeros(c, c);
    for i in 0..c {
        for j in 0..c {
            centered.set(i, j, if i == j { 1.0 } else { 0.0 } - 1.0 / c as f64);
        }
    }
    // Orthonormal basis of the span via Gram-Schmidt on the differences,
    // giving coordinates in R^(c-1); pairwise distances are preserved.
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for i in 1..c {
        let mut v: Vec<f64> = (0..c)
            .map(|j| centered.get(i, j) - centered.get(0, j))
            .collect();
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= proj * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for x in &mut v {
                *x /= norm;
            }
            basis.push(v);
        }
    }
    let mut means = Matrix::zeros(c, dim);
    for i in 0..c {
        for (d, b) in basis.iter().enumerate() {
            let coord: f64 = (0..c).map(|j| centered.get(i, j) * b[j]).sum();
            means.set(i, d, coord);
        }
    }
    // The simplex edge length here is sqrt(2); rescale to `separation`.
    let scale = separation / std::f64::consts::SQRT_2;
    for v in means.data_mut() {
        *v *= scale;
    }
    // Seeded rotation spreading the simplex through all `dim` axes.
    for _ in 0..(2 * dim) {
        let i = rng.next_below(dim as u64) as usize;
        let j = rng.next_below(dim as u64) as usize;
        if i == j {
            continue;
        }
        let theta = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
        let (s, co) = theta.sin_cos();
        for r in 0..c {
            let (vi, vj) = (means.get(r, i), means.get(r, j));
            means.set(r, i, co * vi - s * vj);
            means.set(r, j, s * vi + co * vj);
        }
    }
    Ok(means)
}

/// Generate a seeded Gaussian-mixture classification dataset. Samples are
/// interleaved across classes and assigned ids `0..n`; the trailing
/// `test_fraction` of a seeded shuffle becomes the test partition.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(invalid("need at least 2 classes"));
    }
    if spec.per_class < 2 {
        return Err(invalid(
            "per_class must be at least 2 (train/test split impossible otherwise)",
        ));
    }
    if spec.noise < 0.0 {
        return Err(invalid("noise must be nonnegative"));
    }
    if !(0.0..1.0).contains(&spec.test_fraction) {
        return Err(invalid("test_fraction must be in [0, 1)"));
    }
    let rng = RngStream::new(spec.seed);
    let mut mean_rng = rng.split(1);
    let means = simplex_means(spec.classes, spec.dim, spec.separation, &mut mean_rng)?;

    let n = spec.classes * spec.per_class;
    let mut features = Matrix::zeros(n, spec.dim);
    let mut labels = Vec::with_capacity(n);
    let mut noise_rng = rng.split(2);
    for i in 0..n {
        let class = i % spec.classes;
        labels.push(class);
        let row = features.row_mut(i);
        for (v, &m) in row.iter_mut().zip(means.row(class)) {
            *v = m + spec.noise * noise_rng.normal();
        }
    }

    // Partition: seeded shuffle, last test_fraction of positions become Test.
    let mut order: Vec<usize> = (0..n).collect();
    let mut split_rng = rng.split(3);
    split_rng.shuffle(&mut order);
    let test_count = ((n as f64) * spec.test_fraction).round() as usize;
    let mut partitions = vec![Partition::Pool; n];
    for &i in order.iter().rev().take(test_count) {
        partitions[i] = Partition::Test;
    }

    Ok(Dataset {
        dim: spec.dim,
        num_classes: spec.classes,
        ids: (0..n as u64).collect(),
        features,
        labels,
        partitions,
    })
}

/// Write a dataset as CSV: `id,partition,label,f0..f{D-1}`. Floats use the
/// shortest round-trip decimal form, so save/load is value-exact.
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("id,partition,label");
    for d in 0..ds.dim {
        let _ = write!(out, ",f{d}");
    }
    out.push('\n');
    for i in 0..ds.len() {
        let part = match ds.partitions[i] {
            Partition::Pool => "pool",
            Partition::Test => "test",
        };
        let _ = write!(out, "{},{part},{}", ds.ids[i], ds.labels[i]);
        for v in ds.features.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| invalid(format!("{}: empty dataset file", path.display())))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[0] != "id" || cols[1] != "partition" || cols[2] != "label" {
        return Err(invalid(format!(
            "{}: expected header id,partition,label,f0,...",
            path.display()
        )));
    }
    let dim = cols.len() - 3;
    let mut rows: Vec<(u64, Partition, usize, Vec<f64>)> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 3 {
            return Err(invalid(format!(
                "{}:{}: expected {} fields, got {}",
                path.display(),
                lineno + 2,
                dim + 3,
                fields.len()
            )));
        }
        let bad = |what: &str| invalid(format!("{}:{}: bad {what}", path.display(), lineno + 2));
        let id: u64 = fields[0].parse().map_err(|_| bad("id"))?;
        let partition = match fields[1] {
            "pool" => Partition::Pool,
            "test" => Partition::Test,
            _ => return Err(bad("partition")),
        };
        let label: usize = fields[2].parse().map_err(|_| bad("label"))?;
        let feats: Vec<f64> = fields[3..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| bad("feature")))
            .collect::<Result<_>>()?;
        rows.push((id, partition, label, feats));
    }
    if rows.is_empty() {
        return Err(invalid(format!("{}: no samples", path.display())));
    }
    rows.sort_by_key(|r| r.0);
    if rows.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(invalid(format!("{}: duplicate sample ids", path.display())));
    }
    let num_classes = rows.iter().map(|r| r.2).max().unwrap() + 1;
    if num_classes < 2 {
        return Err(invalid(format!("{}: need at least 2 classes", path.display())));
    }
    let mut features = Matrix::zeros(rows.len(), dim);
    let mut ids = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    let mut partitions = Vec::with_capacity(rows.len());
    for (i, (id, part, label, feats)) in rows.into_iter().enumerate() {
        ids.push(id);
        labels.push(label);
        partitions.push(part);
        features.row_mut(i).copy_from_slice(&feats);
    }
    Ok(Dataset {
        dim,
        num_classes,
        ids,
        features,
        labels,
        partitions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            classes: 3,
            dim: 2,
            per_class: 20,
            noise: 0.1,
            separation: 4.0,
            test_fraction: 0.2,
            seed: 9,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(&small_spec()).unwrap();
        let b = generate_synthetic(&small_spec()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn partitions_and_shapes() {
        let ds = generate_synthetic(&small_spec()).unwrap();
        assert_eq!(ds.len(), 60);
        assert_eq!(ds.test_ids().len(), 12);
        assert_eq!(ds.pool_ids().len(), 48);
        assert_eq!(ds.num_classes, 3);
    }

    #[test]
    fn class_means_are_separated() {
        let ds = generate_synthetic(&SyntheticSpec {
            noise: 0.0,
            ..small_spec()
        })
        .unwrap();
        // zero noise: all samples of a class coincide, classes are far apart
        let a = ds.features_of(0).unwrap(); // class 0
        let b = ds.features_of(1).unwrap(); // class 1
        let d: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        assert!((d - 4.0).abs() < 1e-9, "pairwise mean distance {d}");
    }

    #[test]
    fn per_class_one_is_refused() {
        let spec = SyntheticSpec {
            per_class: 1,
            ..small_spec()
        };
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn dim_too_small_is_refused() {
        let spec = SyntheticSpec {
            classes: 4,
            dim: 2,
            ..small_spec()
        };
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn csv_round_trip_is_value_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let ds = generate_synthetic(&small_spec()).unwrap();
        save_csv(&ds, &path).unwrap();
        let loaded = load_csv(&path).unwrap();
        assert_eq!(ds, loaded);
        // saving the loaded dataset reproduces the file byte for byte
        let path2 = dir.path().join("data2.csv");
        save_csv(&loaded, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }
}
