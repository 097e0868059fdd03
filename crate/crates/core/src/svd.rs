//! Thin SVD by one-sided Jacobi rotations.
//!
//! Slow for large matrices but accurate on exactly rank-deficient inputs, which is the
//! normal case for adapter products `BA`, and fully deterministic.

use crate::error::{Result, XpertError};
use crate::matrix::Matrix;

const MAX_SWEEPS: usize = 80;

/// `M = U diag(σ) Vᵀ` with `σ` descending. `U` is `m × k`, `V` is `n × k`, `k = min(m, n)`.
/// Columns of `U` (or `V` for wide inputs) belonging to zero singular values are zero.
pub(crate) struct Svd {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
}

pub(crate) fn svd(m: &Matrix) -> Result<Svd> {
    if m.rows() >= m.cols() {
        tall_svd(m)
    } else {
        let t = tall_svd(&m.transpose())?;
        Ok(Svd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        })
    }
}

fn tall_svd(a: &Matrix) -> Result<Svd> {
    let (m, n) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();

    // columns this small are rounding noise of an exactly rank-deficient input
    let negligible = (f64::EPSILON * a.frobenius_sq().sqrt()).powi(2);
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if alpha.min(beta) <= negligible || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(XpertError::Degenerate(format!("Jacobi SVD did not converge in {MAX_SWEEPS} sweeps")));
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    if norms.iter().any(|s| !s.is_finite()) {
        return Err(XpertError::NonFinite {
            context: "singular values".into(),
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));
    let top = norms[order[0]];
    let u = Matrix::from_fn(m, n, |i, k| {
        let j = order[k];
        // columns that are zero up to rounding carry no direction
        if norms[j] > top * f64::EPSILON * n as f64 {
            cols[j][i] / norms[j]
        } else {
            0.0
        }
    });
    let v = Matrix::from_fn(n, n, |i, k| v[order[k]][i]);
    Ok(Svd {
        u,
        sigma: order.iter().map(|&j| norms[j]).collect(),
        v,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    for (x, y) in head[p].iter_mut().zip(tail[0].iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}
