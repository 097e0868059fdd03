//! Partial Brain Surgeon: a closed-form, row-separable ridge update to the adapter factor
//! `B` that drives the composed weight towards zero on pruned coordinates.
//!
//! For row `i` with pruned columns `S_i`, residual `r = (W + s·BA)_{i,S_i}` and
//! `A_S = s·A_{:,S_i}` (r × |S_i|), the update solves
//!
//! ```text
//! min_Δb ‖r + Δb·A_S‖² + λ‖Δb‖²   =>   (A_S A_Sᵀ + λI) Δbᵀ = −A_S rᵀ
//! ```
//!
//! The rank-sized system is symmetric positive definite; it is factored by Cholesky with
//! a pivoted elimination fallback.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Result, XpertError};
use crate::matrix::Matrix;
use crate::model::{ensure_binary, LoraLinear};
use crate::par::Parallelism;

pub const DEFAULT_LAMBDA: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PbsOptions {
    pub lambda: f64,
    /// Multiply `A` by the LoRA scale in the row system so `ΔB` acts on the same
    /// product the mask sees. Turning this off solves against the raw `A`.
    pub scale_adapter: bool,
}

impl Default for PbsOptions {
    fn default() -> Self {
        PbsOptions {
            lambda: DEFAULT_LAMBDA,
            scale_adapter: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PbsRowReport {
    pub row: usize,
    pub pruned_count: usize,
    /// `‖r‖²` before the update.
    pub residual_before: f64,
    /// `‖r + Δb·A_S‖²` after the update.
    pub residual_after: f64,
    pub update_norm: f64,
    /// More pruned coordinates than adapter rank: exact suppression is generally infeasible.
    pub over_constrained: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PbsReport {
    pub rows: Vec<PbsRowReport>,
}

impl PbsReport {
    pub fn residual_before(&self) -> f64 {
        self.rows.iter().map(|r| r.residual_before).sum()
    }

    pub fn residual_after(&self) -> f64 {
        self.rows.iter().map(|r| r.residual_after).sum()
    }

    pub fn over_constrained_rows(&self) -> usize {
        self.rows.iter().filter(|r| r.over_constrained).count()
    }

    /// One `key=value` record per row.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "row={} pruned={} residual_before={:e} residual_after={:e} update_norm={:e} over_constrained={}",
                r.row, r.pruned_count, r.residual_before, r.residual_after, r.update_norm, r.over_constrained
            );
        }
        out
    }
}

fn ensure_lambda(lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(XpertError::param("lambda", lambda, "must be finite and positive"));
    }
    Ok(())
}

/// Solves `(A_S A_Sᵀ + λI) x = −A_S rᵀ` and returns `Δb = xᵀ` (length = rank).
pub fn pbs_row_update(residual_row: &[f64], a_cols: &Matrix, lambda: f64) -> Result<Vec<f64>> {
    ensure_lambda(lambda)?;
    if a_cols.cols() != residual_row.len() {
        return Err(XpertError::shape(
            "pbs_row_update",
            format!("a_cols with {} columns", residual_row.len()),
            format!("{}x{}", a_cols.rows(), a_cols.cols()),
        ));
    }
    if residual_row.iter().any(|v| !v.is_finite()) {
        return Err(XpertError::NonFinite {
            context: "pbs_row_update residual".into(),
        });
    }
    a_cols.ensure_finite(|| "pbs_row_update a_cols".into())?;

    let (r, k) = (a_cols.rows(), a_cols.cols());
    // With fewer pruned coordinates than rank, the r×r system is nearly singular
    // (condition ~ ‖A_S‖²/λ). The k×k form `A_S (A_SᵀA_S + λI)⁻¹` is the same map.
    let solution = if k < r {
        let y = spd_solve(&gram_of(&a_cols.transpose(), lambda), residual_row, k)?;
        (0..r)
            .map(|p| -a_cols.row(p).iter().zip(&y).map(|(x, y)| x * y).sum::<f64>())
            .collect()
    } else {
        let rhs: Vec<f64> = (0..r)
            .map(|p| -a_cols.row(p).iter().zip(residual_row).map(|(x, y)| x * y).sum::<f64>())
            .collect();
        spd_solve(&gram_of(a_cols, lambda), &rhs, r)?
    };
    if solution.iter().any(|v| !v.is_finite()) {
        return Err(XpertError::NonFinite {
            context: "pbs_row_update solution".into(),
        });
    }
    Ok(solution)
}

/// `M Mᵀ + λI` for the rows of `m`, row-major.
fn gram_of(m: &Matrix, lambda: f64) -> Vec<f64> {
    let r = m.rows();
    let mut gram = vec![0.0; r * r];
    for p in 0..r {
        for q in 0..=p {
            let v: f64 = m.row(p).iter().zip(m.row(q)).map(|(x, y)| x * y).sum();
            gram[p * r + q] = v;
            gram[q * r + p] = v;
        }
        gram[p * r + p] += lambda;
    }
    gram
}

fn spd_solve(gram: &[f64], rhs: &[f64], n: usize) -> Result<Vec<f64>> {
    match cholesky_solve(gram, rhs, n) {
        Some(x) => Ok(x),
        None => {
            log::debug!("Cholesky failed on a {n}x{n} PBS system, using pivoted elimination");
            gaussian_solve(gram.to_vec(), rhs.to_vec(), n)
        }
    }
}

/// Solves `G x = b` for symmetric positive definite `G` (row-major `n × n`).
fn cholesky_solve(g: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = g[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return None;
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i * n + k] * y[k];
        }
        y[i] = sum / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[k * n + i] * x[k];
        }
        x[i] = sum / l[i * n + i];
    }
    Some(x)
}

/// Gaussian elimination with partial pivoting.
fn gaussian_solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Result<Vec<f64>> {
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&p, &q| a[p * n + col].abs().total_cmp(&a[q * n + col].abs()))
            .expect("non-empty range");
        if a[pivot * n + col].abs() < f64::MIN_POSITIVE {
            return Err(XpertError::Singular(format!("zero pivot in column {col}")));
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            for k in col..n {
                a[row * n + k] -= f * a[col * n + k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = b[i];
        for k in i + 1..n {
            sum -= a[i * n + k] * x[k];
        }
        x[i] = sum / a[i * n + i];
    }
    Ok(x)
}

fn check_mask(layer: &LoraLinear, mask: &Matrix) -> Result<()> {
    let (m, n) = layer.shape();
    mask.ensure_shape("pbs mask", m, n)?;
    ensure_binary(mask)
}

/// Computes `ΔB` for every row of `layer` against `mask`. The caller applies `B ← B + ΔB`.
pub fn pbs_correct(layer: &LoraLinear, mask: &Matrix, lambda: f64) -> Result<(Matrix, PbsReport)> {
    pbs_correct_with(
        layer,
        mask,
        PbsOptions {
            lambda,
            ..PbsOptions::default()
        },
        Parallelism::Sequential,
    )
}

pub fn pbs_correct_with(
    layer: &LoraLinear,
    mask: &Matrix,
    options: PbsOptions,
    par: Parallelism,
) -> Result<(Matrix, PbsReport)> {
    ensure_lambda(options.lambda)?;
    check_mask(layer, mask)?;
    let composed = layer.compose_effective();
    let a = if options.scale_adapter {
        layer.adapter_a().scaled(layer.scale())
    } else {
        layer.adapter_a().clone()
    };
    let rank = layer.rank();

    let rows = par.map(layer.shape().0, |i| -> Result<(Vec<f64>, PbsRowReport)> {
        let pruned: Vec<usize> = (0..mask.cols()).filter(|&j| mask[(i, j)] == 0.0).collect();
        if pruned.is_empty() {
            return Ok((
                vec![0.0; rank],
                PbsRowReport {
                    row: i,
                    pruned_count: 0,
                    residual_before: 0.0,
                    residual_after: 0.0,
                    update_norm: 0.0,
                    over_constrained: false,
                },
            ));
        }
        let residual: Vec<f64> = pruned.iter().map(|&j| composed[(i, j)]).collect();
        let a_cols = a.select_cols(&pruned)?;
        let delta = pbs_row_update(&residual, &a_cols, options.lambda).map_err(|e| e.context(format!("row {i}")))?;
        let residual_after: f64 = (0..pruned.len())
            .map(|k| {
                let v = residual[k] + (0..rank).map(|p| delta[p] * a_cols[(p, k)]).sum::<f64>();
                v * v
            })
            .sum();
        let report = PbsRowReport {
            row: i,
            pruned_count: pruned.len(),
            residual_before: residual.iter().map(|v| v * v).sum(),
            residual_after,
            update_norm: delta.iter().map(|v| v * v).sum::<f64>().sqrt(),
            over_constrained: pruned.len() > rank,
        };
        Ok((delta, report))
    });

    let mut data = Vec::with_capacity(layer.shape().0 * rank);
    let mut report = PbsReport::default();
    for row in rows {
        let (delta, r) = row?;
        data.extend(delta);
        report.rows.push(r);
    }
    Ok((Matrix::new(layer.shape().0, rank, data)?, report))
}

/// Runs [`pbs_correct_with`] and writes `B + ΔB` back into the layer.
pub fn apply_pbs(layer: &mut LoraLinear, mask: &Matrix, options: PbsOptions, par: Parallelism) -> Result<PbsReport> {
    let (delta, report) = pbs_correct_with(layer, mask, options, par)?;
    let updated = layer.adapter_b().add(&delta)?;
    layer.set_adapter_b(updated)?;
    Ok(report)
}

/// `‖(1 − M) ⊙ (W + scale·BA)‖²_F`.
pub fn masked_residual_norm(layer: &LoraLinear, mask: &Matrix) -> Result<f64> {
    let (m, n) = layer.shape();
    mask.ensure_shape("masked_residual_norm", m, n)?;
    let composed = layer.compose_effective();
    Ok(composed
        .data()
        .iter()
        .zip(mask.data())
        .map(|(w, keep)| {
            let v = (1.0 - keep) * w;
            v * v
        })
        .sum())
}
