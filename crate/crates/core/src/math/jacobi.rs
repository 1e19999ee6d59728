//! Cyclic Jacobi eigensolver for small dense symmetric matrices, and the
//! singular-value routine built on it.
//!
//! Matrices here are class-count sized (C <= ~100), where an iterative dense
//! solver is plenty and exactly testable against small-matrix oracles.

use crate::error::{invalid, Result};
use crate::math::Matrix;

/// Off-diagonal Frobenius norm, relative to the matrix scale, at which the
/// sweep loop stops.
const OFF_DIAGONAL_TOL: f64 = 1e-10;

const MAX_SWEEPS: usize = 100;

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut sum = 0.0;
    for p in 0..n {
        for q in (p + 1)..n {
            let v = a.get(p, q);
            sum += 2.0 * v * v;
        }
    }
    sum.sqrt()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, sorted
/// descending. Converges quadratically; sweeps stop once the off-diagonal
/// norm falls below `1e-10 * max(1, ||A||_F)`.
pub fn symmetric_eigenvalues(a: &Matrix) -> Result<Vec<f64>> {
    if a.rows() != a.cols() {
        return Err(invalid("eigenvalues of a non-square matrix"));
    }
    if !a.is_finite() {
        return Err(invalid("eigenvalues of a non-finite matrix"));
    }
    let n = a.rows();
    if n == 0 {
        return Ok(Vec::new());
    }
    if n == 1 {
        return Ok(vec![a.get(0, 0)]);
    }
    let mut m = a.clone();
    let tol = OFF_DIAGONAL_TOL * m.frobenius_norm().max(1.0);
    for _ in 0..MAX_SWEEPS {
        if off_diagonal_norm(&m) <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                // Stable rotation angle (Golub & Van Loan 8.4).
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // Apply the rotation to rows/columns p and q.
                for k in 0..n {
                    let akp = m.get(k, p);
                    let akq = m.get(k, q);
                    m.set(k, p, c * akp - s * akq);
                    m.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = m.get(p, k);
                    let aqk = m.get(q, k);
                    m.set(p, k, c * apk - s * aqk);
                    m.set(q, k, s * apk + c * aqk);
                }
                // Force exact symmetry on the zeroed pair.
                m.set(p, q, 0.0);
                m.set(q, p, 0.0);
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    eig.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(eig)
}

/// Singular values of an `m x c` matrix, sorted descending: square roots of
/// the eigenvalues of `X^T X` (or `X X^T`, whichever is smaller).
pub fn singular_values(x: &Matrix) -> Result<Vec<f64>> {
    if !x.is_finite() {
        return Err(invalid("singular values of a non-finite matrix"));
    }
    let (m, c) = (x.rows(), x.cols());
    let gram = if c <= m {
        x.matmul_tn(x)? // X^T X, c x c
    } else {
        x.matmul_nt(x)? // X X^T, m x m
    };
    let eig = symmetric_eigenvalues(&gram)?;
    Ok(eig.into_iter().map(|l| l.max(0.0).sqrt()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn rank_one_matrix() {
        // u v^T with ||u|| = ||v|| = 1 has singular values [1, 0, ...].
        let u = [0.6, 0.8];
        let v = [1.0 / 3.0f64.sqrt(); 3];
        let rows: Vec<Vec<f64>> = u.iter().map(|a| v.iter().map(|b| a * b).collect()).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let sv = singular_values(&x).unwrap();
        assert_eq!(sv.len(), 2);
        assert_close(sv[0], 1.0, 1e-10);
        assert_close(sv[1], 0.0, 1e-10);
    }

    #[test]
    fn identity_matrix() {
        let mut x = Matrix::zeros(3, 3);
        for i in 0..3 {
            x.set(i, i, 1.0);
        }
        let sv = singular_values(&x).unwrap();
        for v in sv {
            assert_close(v, 1.0, 1e-12);
        }
    }

    /// Library-free oracle: eigenvalues of a small symmetric matrix as roots
    /// of the characteristic polynomial, located by sign-change scan plus
    /// bisection on det(A - lambda I).
    fn charpoly_eigenvalues(a: &Matrix) -> Vec<f64> {
        let n = a.rows();
        let det = |lambda: f64| -> f64 {
            // Gaussian elimination with partial pivoting on A - lambda I.
            let mut m: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    (0..n)
                        .map(|j| a.get(i, j) - if i == j { lambda } else { 0.0 })
                        .collect()
                })
                .collect();
            let mut d = 1.0;
            for col in 0..n {
                let piv = (col..n)
                    .max_by(|&i, &j| m[i][col].abs().partial_cmp(&m[j][col].abs()).unwrap())
                    .unwrap();
                if m[piv][col] == 0.0 {
                    return 0.0;
                }
                if piv != col {
                    m.swap(piv, col);
                    d = -d;
                }
                d *= m[col][col];
                for row in (col + 1)..n {
                    let f = m[row][col] / m[col][col];
                    for k in col..n {
                        m[row][k] -= f * m[col][k];
                    }
                }
            }
            d
        };
        // All eigenvalues of a PSD gram matrix lie in [0, trace].
        let hi = (0..n).map(|i| a.get(i, i)).sum::<f64>() + 1.0;
        let lo = -1.0;
        let steps = 200_000;
        let h = (hi - lo) / steps as f64;
        let mut roots = Vec::new();
        let mut prev = det(lo);
        for i in 1..=steps {
            let x = lo + i as f64 * h;
            let cur = det(x);
            if prev == 0.0 {
                roots.push(lo + (i - 1) as f64 * h);
            } else if prev.signum() != cur.signum() && cur != 0.0 {
                // bisect
                let (mut a0, mut b0) = (x - h, x);
                for _ in 0..200 {
                    let mid = 0.5 * (a0 + b0);
                    let dm = det(mid);
                    if dm == 0.0 {
                        a0 = mid;
                        b0 = mid;
                        break;
                    }
                    if dm.signum() == prev.signum() {
                        a0 = mid;
                    } else {
                        b0 = mid;
                    }
                }
                roots.push(0.5 * (a0 + b0));
            }
            prev = cur;
        }
        roots.sort_by(|a, b| b.partial_cmp(a).unwrap());
        roots
    }

    #[test]
    fn random_matrix_matches_charpoly_bisection_oracle() {
        let mut rng = RngStream::new(41);
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..4).map(|_| rng.uniform(-2.0, 2.0)).collect())
            .collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let sv = singular_values(&x).unwrap();
        let gram = x.matmul_tn(&x).unwrap();
        let oracle: Vec<f64> = charpoly_eigenvalues(&gram)
            .into_iter()
            .map(|l| l.max(0.0).sqrt())
            .collect();
        assert_eq!(oracle.len(), 4, "oracle found {} roots", oracle.len());
        for (a, b) in sv.iter().zip(&oracle) {
            assert_close(*a, *b, 1e-6);
        }
    }

    #[test]
    fn frobenius_identity_on_random_matrices() {
        let mut rng = RngStream::new(43);
        for _ in 0..50 {
            let m = 2 + rng.next_below(7) as usize;
            let c = 2 + rng.next_below(7) as usize;
            let rows: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..c).map(|_| rng.uniform(-3.0, 3.0)).collect())
                .collect();
            let x = Matrix::from_rows(&rows).unwrap();
            let sv = singular_values(&x).unwrap();
            assert_eq!(sv.len(), m.min(c));
            // descending and nonnegative
            for w in sv.windows(2) {
                assert!(w[0] >= w[1]);
            }
            assert!(sv.iter().all(|&v| v >= 0.0));
            let sum_sq: f64 = sv.iter().map(|v| v * v).sum();
            let frob_sq = x.frobenius_norm().powi(2);
            assert!(
                (sum_sq - frob_sq).abs() <= 1e-6 * frob_sq.max(1e-12),
                "{sum_sq} vs {frob_sq}"
            );
        }
    }

    #[test]
    fn rejects_non_finite() {
        let x = Matrix::from_rows(&[vec![1.0, f64::NAN], vec![0.0, 1.0]]).unwrap();
        assert!(singular_values(&x).is_err());
    }
}
