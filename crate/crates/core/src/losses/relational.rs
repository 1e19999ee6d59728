//! Relational objectives: pairwise-distance/angle matching and cross-sample
//! correlation matching. Both operate on whole batches of logits.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::losses::{KdConfig, LossOutput};
use crate::math::{self, Matrix};

/// Distance/angle matching weights. The defaults are the original
/// implementation's.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RkdConfig {
    pub w_dist: f64,
    pub w_angle: f64,
    pub huber_delta: f64,
}

impl Default for RkdConfig {
    fn default() -> Self {
        RkdConfig {
            w_dist: 25.0,
            w_angle: 50.0,
            huber_delta: 1.0,
        }
    }
}

/// Pairwise L2 distances and mean over ordered pairs. `dist[i*b + j]` is
/// `||x_i - x_j||`; the diagonal stays 0.
fn pairwise_distances(x: &Matrix) -> (Vec<f64>, f64) {
    let b = x.rows();
    let mut dist = vec![0.0; b * b];
    let mut sum = 0.0;
    for i in 0..b {
        for j in (i + 1)..b {
            let d = x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(a, c)| (a - c) * (a - c))
                .sum::<f64>()
                .sqrt();
            dist[i * b + j] = d;
            dist[j * b + i] = d;
            sum += 2.0 * d;
        }
    }
    let pairs = (b * (b - 1)) as f64;
    (dist, sum / pairs)
}

/// Relational distillation: match the student's normalized pairwise distances
/// and triplet angle cosines to the teacher's.
///
/// Distance potentials are `||x_i - x_j|| / mu` with `mu` the batch mean
/// pairwise distance, normalized independently for student and teacher; a
/// degenerate batch (`mu = 0`) contributes a zero term. Both penalties are
/// Huber with `cfg.huber_delta`. Gradient blocks: one per batch row.
pub fn rkd_loss(student: &Matrix, teacher: &Matrix, cfg: &RkdConfig) -> Result<LossOutput> {
    let b = student.rows();
    let c = student.cols();
    if teacher.rows() != b || teacher.cols() != c {
        return Err(invalid(format!(
            "rkd_loss: shape mismatch {}x{} vs {}x{}",
            b,
            c,
            teacher.rows(),
            teacher.cols()
        )));
    }
    if b < 3 {
        return Err(invalid("rkd_loss: batch must have at least 3 samples"));
    }
    let delta = cfg.huber_delta;
    let pairs = (b * (b - 1)) as f64;
    let mut grads = vec![vec![0.0; c]; b];

    // Distance term.
    let (d_s, mu_s) = pairwise_distances(student);
    let (d_t, mu_t) = pairwise_distances(teacher);
    let mut dist_term = 0.0;
    if mu_s > 0.0 && mu_t > 0.0 {
        // grad of (1/P) sum H(psi_s - psi_t) wrt student rows; psi depends on
        // every row through mu, so the mu chain is accumulated separately.
        let mut hprime_dot_d = 0.0; // sum_ij H'(e_ij) d_ij
        let mut hprime = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                if i == j {
                    continue;
                }
                let e = d_s[i * b + j] / mu_s - d_t[i * b + j] / mu_t;
                dist_term += math::huber(e, delta);
                let hp = math::huber_grad(e, delta);
                hprime[i * b + j] = hp;
                hprime_dot_d += hp * d_s[i * b + j];
            }
        }
        dist_term /= pairs;

        let w = cfg.w_dist;
        // Direct term: pairs touching row k.
        for i in 0..b {
            for j in 0..b {
                if i == j || d_s[i * b + j] == 0.0 {
                    continue;
                }
                let g = w * hprime[i * b + j] / (pairs * mu_s * d_s[i * b + j]);
                let (ri, rj) = (student.row(i), student.row(j));
                for ((gi, &a), &bb) in grads[i].iter_mut().zip(ri).zip(rj) {
                    *gi += g * (a - bb);
                }
                for ((gj, &a), &bb) in grads[j].iter_mut().zip(ri).zip(rj) {
                    *gj -= g * (a - bb);
                }
            }
        }
        // Mean-normalization chain: d mu / d x_k = (2/P) sum_{j!=k} unit_kj.
        let coeff = -w * hprime_dot_d / (pairs * mu_s * mu_s) * (2.0 / pairs);
        for k in 0..b {
            for j in 0..b {
                if j == k || d_s[k * b + j] == 0.0 {
                    continue;
                }
                let s = coeff / d_s[k * b + j];
                let (rk, rj) = (student.row(k), student.row(j));
                for ((gk, &a), &bb) in grads[k].iter_mut().zip(rk).zip(rj) {
                    *gk += s * (a - bb);
                }
            }
        }
    }

    // Angle term: ordered triplets (i, j, k), vertex at j.
    let triplets = (b * (b - 1) * (b - 2)) as f64;
    let mut angle_term = 0.0;
    {
        let cos_at = |x: &Matrix, d: &[f64], i: usize, j: usize, k: usize| -> f64 {
            let (ni, nk) = (d[i * b + j], d[k * b + j]);
            if ni == 0.0 || nk == 0.0 {
                return 0.0;
            }
            let rj = x.row(j);
            let dot: f64 = x
                .row(i)
                .iter()
                .zip(rj)
                .zip(x.row(k).iter().zip(rj))
                .map(|((a, c), (e, f))| (a - c) * (e - f))
                .sum();
            dot / (ni * nk)
        };
        let w = cfg.w_angle;
        for i in 0..b {
            for j in 0..b {
                if j == i {
                    continue;
                }
                for k in 0..b {
                    if k == i || k == j {
                        continue;
                    }
                    let cs = cos_at(student, &d_s, i, j, k);
                    let ct = cos_at(teacher, &d_t, i, j, k);
                    let e = cs - ct;
                    angle_term += math::huber(e, delta);
                    let (ni, nk) = (d_s[i * b + j], d_s[k * b + j]);
                    if ni == 0.0 || nk == 0.0 {
                        continue;
                    }
                    let hp = w * math::huber_grad(e, delta) / triplets;
                    // d cos / d u = w/(|u||w|) - cos * u/|u|^2, u = x_i - x_j,
                    // w = x_k - x_j; row j collects the negated sum.
                    let rj = student.row(j);
                    let (ri, rk) = (student.row(i), student.row(k));
                    for idx in 0..c {
                        let u = ri[idx] - rj[idx];
                        let wv = rk[idx] - rj[idx];
                        let du = wv / (ni * nk) - cs * u / (ni * ni);
                        let dw = u / (ni * nk) - cs * wv / (nk * nk);
                        grads[i][idx] += hp * du;
                        grads[k][idx] += hp * dw;
                        grads[j][idx] -= hp * (du + dw);
                    }
                }
            }
        }
        angle_term /= triplets;
    }

    Ok(LossOutput {
        value: cfg.w_dist * dist_term + cfg.w_angle * angle_term,
        grads,
    })
}

/// Cross-sample correlation matching: rows are softened by softmax at
/// `kd.temperature`, then the loss is `w_inter * mean_rows (1 - pearson)` plus
/// `w_intra * mean_cols (1 - pearson)` between student and teacher matrices.
/// Gradient blocks: one per batch row.
pub fn dist_loss(
    student: &Matrix,
    teacher: &Matrix,
    kd: &KdConfig,
    w_inter: f64,
    w_intra: f64,
) -> Result<LossOutput> {
    let b = student.rows();
    let c = student.cols();
    if teacher.rows() != b || teacher.cols() != c {
        return Err(invalid(format!(
            "dist_loss: shape mismatch {}x{} vs {}x{}",
            b,
            c,
            teacher.rows(),
            teacher.cols()
        )));
    }
    if b < 2 {
        return Err(invalid("dist_loss: batch must have at least 2 samples"));
    }
    let t = kd.temperature;
    let mut y_s = Matrix::zeros(b, c);
    let mut y_t = Matrix::zeros(b, c);
    for r in 0..b {
        y_s.row_mut(r)
            .copy_from_slice(&math::stable_softmax_temp(student.row(r), t)?);
        y_t.row_mut(r)
            .copy_from_slice(&math::stable_softmax_temp(teacher.row(r), t)?);
    }

    // d pearson(u, v) / d u with v constant; zero for degenerate vectors.
    let pearson_and_grad = |u: &[f64], v: &[f64]| -> (f64, Vec<f64>) {
        let m = u.len() as f64;
        let mu = u.iter().sum::<f64>() / m;
        let mv = v.iter().sum::<f64>() / m;
        let mut cov = 0.0;
        let mut su2 = 0.0;
        let mut sv2 = 0.0;
        for (&x, &y) in u.iter().zip(v) {
            cov += (x - mu) * (y - mv);
            su2 += (x - mu) * (x - mu);
            sv2 += (y - mv) * (y - mv);
        }
        if su2 == 0.0 || sv2 == 0.0 {
            return (0.0, vec![0.0; u.len()]);
        }
        let (su, sv) = (su2.sqrt(), sv2.sqrt());
        let rho = cov / (su * sv);
        let grad = u
            .iter()
            .zip(v)
            .map(|(&x, &y)| ((y - mv) / sv - rho * (x - mu) / su) / su)
            .collect();
        (rho, grad)
    };

    // Accumulate d value / d Y_s, then chain through the row softmax.
    let mut g_y = Matrix::zeros(b, c);
    let mut inter = 0.0;
    for r in 0..b {
        let (rho, g) = pearson_and_grad(y_s.row(r), y_t.row(r));
        inter += 1.0 - rho;
        let scale = -w_inter / b as f64;
        for (acc, gv) in g_y.row_mut(r).iter_mut().zip(&g) {
            *acc += scale * gv;
        }
    }
    inter /= b as f64;

    let mut intra = 0.0;
    for col in 0..c {
        let u: Vec<f64> = y_s.column(col);
        let v: Vec<f64> = y_t.column(col);
        let (rho, g) = pearson_and_grad(&u, &v);
        intra += 1.0 - rho;
        let scale = -w_intra / c as f64;
        for (r, gv) in g.iter().enumerate() {
            let cur = g_y.get(r, col);
            g_y.set(r, col, cur + scale * gv);
        }
    }
    intra /= c as f64;

    let mut grads = Vec::with_capacity(b);
    for r in 0..b {
        let y = y_s.row(r);
        let g = g_y.row(r);
        let inner: f64 = y.iter().zip(g).map(|(&yv, &gv)| yv * gv).sum();
        grads.push(
            y.iter()
                .zip(g)
                .map(|(&yv, &gv)| yv * (gv - inner) / t)
                .collect(),
        );
    }

    Ok(LossOutput {
        value: w_inter * inter + w_intra * intra,
        grads,
    })
}
