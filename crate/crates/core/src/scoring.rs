//! Importance scores (ForeSight, attention Q/K, Wanda, magnitude), the exact two-layer
//! losses they approximate, and the closed-form Hessian diagonal used to check them.

use serde::{Deserialize, Serialize};

use crate::error::{Result, XpertError};
use crate::matrix::{norm2, Matrix};
use crate::model::{CalibrationStats, PairingRule, ToyModel};
use crate::par::Parallelism;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Foresight,
    ForesightQ,
    ForesightK,
    Wanda,
    Magnitude,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionSide {
    Q,
    K,
}

/// Nonnegative per-weight importance, same shape as the weight it scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    scores: Matrix,
    criterion: Criterion,
}

impl ScoreMatrix {
    pub fn new(scores: Matrix, criterion: Criterion) -> Result<Self> {
        if let Some(&bad) = scores.data().iter().find(|v| **v < 0.0) {
            return Err(XpertError::param("scores", bad, "must be nonnegative"));
        }
        Ok(ScoreMatrix { scores, criterion })
    }

    pub fn scores(&self) -> &Matrix {
        &self.scores
    }

    pub fn criterion(&self) -> Criterion {
        self.criterion
    }

    pub fn shape(&self) -> (usize, usize) {
        self.scores.shape()
    }

    pub fn into_matrix(self) -> Matrix {
        self.scores
    }
}

fn check_norms(norms: &[f64], expected: usize, op: &'static str) -> Result<()> {
    if norms.len() != expected {
        return Err(XpertError::shape(op, format!("{expected} input norms"), format!("{}", norms.len())));
    }
    if let Some(&bad) = norms.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(XpertError::param("input_col_norms", bad, "must be finite and nonnegative"));
    }
    Ok(())
}

/// `score[i][j] = |w[i][j]| · downstream[j] · norms[i]`, one row per work item.
fn product_scores(
    w: &Matrix,
    downstream: &[f64],
    norms: &[f64],
    criterion: Criterion,
    par: Parallelism,
) -> Result<ScoreMatrix> {
    let cols = w.cols();
    let rows = par.map(w.rows(), |i| {
        w.row(i)
            .iter()
            .zip(downstream)
            .map(|(v, d)| v.abs() * d * norms[i])
            .collect::<Vec<_>>()
    });
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    let scores = Matrix::new(w.rows(), cols, data).map_err(|e| e.context(format!("{criterion:?} scores")))?;
    Ok(ScoreMatrix { scores, criterion })
}

/// ForeSight score of every entry of the upstream effective weight `w1_eff` (m × n),
/// using the downstream effective weight `w2_eff` (n × p) and the calibration
/// input column norms (length m).
pub fn foresight_scores(w1_eff: &Matrix, w2_eff: &Matrix, input_col_norms: &[f64]) -> Result<ScoreMatrix> {
    foresight_scores_with(w1_eff, w2_eff, input_col_norms, Parallelism::Sequential)
}

pub fn foresight_scores_with(
    w1_eff: &Matrix,
    w2_eff: &Matrix,
    input_col_norms: &[f64],
    par: Parallelism,
) -> Result<ScoreMatrix> {
    if w1_eff.cols() != w2_eff.rows() {
        return Err(XpertError::shape(
            "foresight_scores",
            format!("w2_eff with {} rows", w1_eff.cols()),
            format!("{}x{}", w2_eff.rows(), w2_eff.cols()),
        ));
    }
    check_norms(input_col_norms, w1_eff.rows(), "foresight_scores")?;
    let downstream = w2_eff.row_norms();
    product_scores(w1_eff, &downstream, input_col_norms, Criterion::Foresight, par)
}

/// Joint Q/K scoring for an attention block. Both projections are `d × d_k`.
///
/// The Q side weighs entry `(i, j)` by the norm of row `j` of K; the K side by the
/// norm of column `j` of Q. The asymmetry is intentional and kept as is.
pub fn foresight_attention_scores(
    q_eff: &Matrix,
    k_eff: &Matrix,
    input_col_norms: &[f64],
    side: AttentionSide,
) -> Result<ScoreMatrix> {
    foresight_attention_scores_with(q_eff, k_eff, input_col_norms, side, Parallelism::Sequential)
}

pub fn foresight_attention_scores_with(
    q_eff: &Matrix,
    k_eff: &Matrix,
    input_col_norms: &[f64],
    side: AttentionSide,
    par: Parallelism,
) -> Result<ScoreMatrix> {
    if q_eff.shape() != k_eff.shape() {
        return Err(XpertError::shape(
            "foresight_attention_scores",
            format!("k_eff {}x{}", q_eff.rows(), q_eff.cols()),
            format!("{}x{}", k_eff.rows(), k_eff.cols()),
        ));
    }
    check_norms(input_col_norms, q_eff.rows(), "foresight_attention_scores")?;
    let d_k = q_eff.cols();
    match side {
        AttentionSide::Q => {
            // row j of K exists only when d_k <= d
            if d_k > k_eff.rows() {
                return Err(XpertError::shape(
                    "foresight_attention_scores (Q side)",
                    format!("d_k <= d ({})", k_eff.rows()),
                    format!("d_k = {d_k}"),
                ));
            }
            let downstream: Vec<f64> = (0..d_k).map(|j| norm2(k_eff.row(j))).collect();
            product_scores(q_eff, &downstream, input_col_norms, Criterion::ForesightQ, par)
        }
        AttentionSide::K => {
            let downstream = q_eff.col_norms();
            product_scores(k_eff, &downstream, input_col_norms, Criterion::ForesightK, par)
        }
    }
}

/// `|w[i][j]| · norms[i]`.
pub fn wanda_scores(w_eff: &Matrix, input_col_norms: &[f64]) -> Result<ScoreMatrix> {
    wanda_scores_with(w_eff, input_col_norms, Parallelism::Sequential)
}

pub fn wanda_scores_with(w_eff: &Matrix, input_col_norms: &[f64], par: Parallelism) -> Result<ScoreMatrix> {
    check_norms(input_col_norms, w_eff.rows(), "wanda_scores")?;
    let ones = vec![1.0; w_eff.cols()];
    product_scores(w_eff, &ones, input_col_norms, Criterion::Wanda, par)
}

/// `|w[i][j]|`.
pub fn magnitude_scores(w_eff: &Matrix) -> ScoreMatrix {
    ScoreMatrix {
        scores: w_eff.map(f64::abs),
        criterion: Criterion::Magnitude,
    }
}

/// Scores layer `idx` of `model` according to its pairing rule.
///
/// `criterion` selects the family: `Wanda` and `Magnitude` ignore pairing; any ForeSight
/// variant follows the layer's rule, with `LocalFallback` layers scored Wanda-style.
pub fn score_layer(
    model: &ToyModel,
    idx: usize,
    stats: &CalibrationStats,
    criterion: Criterion,
    par: Parallelism,
) -> Result<ScoreMatrix> {
    let layer = model
        .layers()
        .get(idx)
        .ok_or_else(|| XpertError::InvalidModel(format!("no layer {idx}")))?;
    if idx >= stats.num_layers() {
        return Err(XpertError::InvalidModel(format!("no calibration statistics for layer {idx}")));
    }
    let w_eff = layer.compose_effective();
    let norms = stats.layer(idx);
    match criterion {
        Criterion::Magnitude => Ok(magnitude_scores(&w_eff)),
        Criterion::Wanda => wanda_scores_with(&w_eff, norms, par),
        Criterion::Foresight | Criterion::ForesightQ | Criterion::ForesightK => {
            let rule = model.pairing().get(&idx).copied().unwrap_or(PairingRule::LocalFallback);
            match rule {
                PairingRule::Downstream(p) => {
                    foresight_scores_with(&w_eff, &model.layer(p).compose_effective(), norms, par)
                }
                PairingRule::AttentionQ(k) => foresight_attention_scores_with(
                    &w_eff,
                    &model.layer(k).compose_effective(),
                    norms,
                    AttentionSide::Q,
                    par,
                ),
                PairingRule::AttentionK(q) => foresight_attention_scores_with(
                    &model.layer(q).compose_effective(),
                    &w_eff,
                    norms,
                    AttentionSide::K,
                    par,
                ),
                PairingRule::LocalFallback => wanda_scores_with(&w_eff, norms, par),
            }
        }
    }
}

/// `X · (M ⊙ W₁ − W₁)`, the perturbation that pruning injects into the first layer's output.
fn pruning_perturbation(mask: &Matrix, w1_eff: &Matrix, x: &Matrix) -> Result<Matrix> {
    if mask.shape() != w1_eff.shape() {
        return Err(XpertError::shape(
            "mask",
            format!("{}x{}", w1_eff.rows(), w1_eff.cols()),
            format!("{}x{}", mask.rows(), mask.cols()),
        ));
    }
    let delta = mask.hadamard(w1_eff)?.sub(w1_eff)?;
    x.matmul(&delta)
}

/// `‖X · (M ⊙ W̃₁ − W̃₁) · W̃₂‖²_F`: the output error pruning causes one layer downstream.
pub fn foresight_loss(mask: &Matrix, w1_eff: &Matrix, w2_eff: &Matrix, x: &Matrix) -> Result<f64> {
    let e = pruning_perturbation(mask, w1_eff, x)?;
    Ok(e.matmul(w2_eff)?.frobenius_sq())
}

/// `‖X · (M ⊙ W̃₁ − W̃₁)‖²_F`.
pub fn local_loss(mask: &Matrix, w1_eff: &Matrix, x: &Matrix) -> Result<f64> {
    Ok(pruning_perturbation(mask, w1_eff, x)?.frobenius_sq())
}

fn check_index(m: &Matrix, i: usize, j: usize) -> Result<()> {
    m.get(i, j).map(|_| ())
}

/// Second derivative of `L(U₁) = ‖X U₁ U₂‖²_F` with respect to `U₁[i][j]`:
/// `2 · (XᵀX)_{ii} · (U₂U₂ᵀ)_{jj}`.
pub fn exact_hessian_diag(x: &Matrix, u2: &Matrix, i: usize, j: usize) -> Result<f64> {
    if i >= x.cols() || j >= u2.rows() {
        return Err(XpertError::IndexOutOfRange {
            row: i,
            col: j,
            rows: x.cols(),
            cols: u2.rows(),
        });
    }
    let gram_ii: f64 = (0..x.rows()).map(|t| x[(t, i)] * x[(t, i)]).sum();
    let energy_jj: f64 = u2.row(j).iter().map(|v| v * v).sum();
    Ok(2.0 * gram_ii * energy_jj)
}

/// Exact increase of the two-layer loss when only `u1[i][j]` is zeroed.
pub fn exact_prune_delta(x: &Matrix, u1: &Matrix, u2: &Matrix, i: usize, j: usize) -> Result<f64> {
    check_index(u1, i, j)?;
    let mut mask = Matrix::ones(u1.rows(), u1.cols());
    mask[(i, j)] = 0.0;
    foresight_loss(&mask, u1, u2, x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn appendix() -> (Matrix, Matrix, Matrix) {
        (
            Matrix::from_rows(&[[3.0, 6.0]]),
            Matrix::from_rows(&[[2.0, 2.0], [4.0, 1.0]]),
            Matrix::from_rows(&[[4.0, 4.0], [8.0, 1.0]]),
        )
    }

    fn single_zero(i: usize, j: usize) -> Matrix {
        let mut m = Matrix::ones(2, 2);
        m[(i, j)] = 0.0;
        m
    }

    #[test]
    fn appendix_losses() {
        let (x, w1, w2) = appendix();
        assert_eq!(foresight_loss(&Matrix::ones(2, 2), &w1, &w2, &x).unwrap(), 0.0);
        assert_eq!(local_loss(&Matrix::ones(2, 2), &w1, &x).unwrap(), 0.0);
        assert_eq!(local_loss(&single_zero(0, 0), &w1, &x).unwrap(), 36.0);
        assert_eq!(local_loss(&single_zero(1, 1), &w1, &x).unwrap(), 36.0);
        assert_eq!(foresight_loss(&single_zero(0, 0), &w1, &w2, &x).unwrap(), 1152.0);
        assert_eq!(foresight_loss(&single_zero(1, 1), &w1, &w2, &x).unwrap(), 2340.0);
        assert_eq!(exact_prune_delta(&x, &w1, &w2, 0, 0).unwrap(), 1152.0);
        assert_eq!(exact_prune_delta(&x, &w1, &w2, 1, 1).unwrap(), 2340.0);
    }

    #[test]
    fn appendix_scores() {
        let (x, w1, w2) = appendix();
        let norms = x.col_norms();
        let fs = foresight_scores(&w1, &w2, &norms).unwrap();
        // 2·√32·3 and 1·√65·6, evaluated by hand
        assert!((fs.scores()[(0, 0)] - 33.941_125_496_954_28).abs() < 1e-9);
        assert!((fs.scores()[(1, 1)] - 48.373_546_489_791_3).abs() < 1e-9);
        let wa = wanda_scores(&w1, &norms).unwrap();
        assert_eq!(wa.scores()[(0, 0)], 6.0);
        assert_eq!(wa.scores()[(1, 1)], 6.0);
    }

    #[test]
    fn constant_downstream_reduces_to_wanda() {
        let w1 = Matrix::from_rows(&[[1.0, -2.0, 0.5], [3.0, 0.0, -1.0]]);
        let norms = [0.7, 2.0];
        let fs = foresight_scores(&w1, &Matrix::ones(3, 4), &norms).unwrap();
        let wa = wanda_scores(&w1, &norms).unwrap();
        for (f, w) in fs.scores().data().iter().zip(wa.scores().data()) {
            assert!((f - w * 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn wanda_edge_cases() {
        assert_eq!(wanda_scores(&Matrix::zeros(2, 3), &[1.0, 5.0]).unwrap().scores(), &Matrix::zeros(2, 3));
        let w = Matrix::from_rows(&[[1.0, -2.0], [-3.0, 4.0]]);
        assert_eq!(wanda_scores(&w, &[1.0, 1.0]).unwrap().scores(), &w.map(f64::abs));
        assert!(wanda_scores(&w, &[1.0]).is_err());
        assert!(wanda_scores(&w, &[1.0, -1.0]).is_err());
    }

    #[test]
    fn attention_symmetric_instance_agrees() {
        let q = Matrix::from_rows(&[[1.0, -2.0], [-2.0, 3.0]]);
        let norms = [1.5, 0.5];
        let qs = foresight_attention_scores(&q, &q, &norms, AttentionSide::Q).unwrap();
        let ks = foresight_attention_scores(&q, &q, &norms, AttentionSide::K).unwrap();
        assert_eq!(qs.scores(), ks.scores());
    }

    #[test]
    fn attention_zero_key_row_zeroes_query_column() {
        let q = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let k = Matrix::from_rows(&[[1.0, 1.0], [0.0, 0.0], [2.0, 2.0]]);
        let s = foresight_attention_scores(&q, &k, &[1.0, 1.0, 1.0], AttentionSide::Q).unwrap();
        assert!((0..3).all(|i| s.scores()[(i, 1)] == 0.0));
        assert!(foresight_attention_scores(&q, &Matrix::zeros(2, 2), &[1.0; 3], AttentionSide::Q).is_err());
    }

    #[test]
    fn hessian_edge_cases() {
        // orthonormal columns of X, unit rows of U2
        let x = Matrix::from_rows(&[[0.6, 0.0], [0.8, 0.0], [0.0, 1.0]]);
        let u2 = Matrix::from_rows(&[[0.6, 0.8], [1.0, 0.0], [0.0, -1.0]]);
        for i in 0..2 {
            for j in 0..3 {
                assert!((exact_hessian_diag(&x, &u2, i, j).unwrap() - 2.0).abs() < 1e-12);
            }
        }
        let h = exact_hessian_diag(&x, &u2, 0, 1).unwrap();
        assert!((exact_hessian_diag(&x.scaled(2.0), &u2, 0, 1).unwrap() - 4.0 * h).abs() < 1e-12);
        assert!(exact_hessian_diag(&x, &u2, 2, 0).is_err());
        assert!(exact_hessian_diag(&x, &u2, 0, 3).is_err());
    }

    #[test]
    fn prune_delta_of_zero_entry() {
        let (x, mut w1, w2) = appendix();
        w1[(0, 1)] = 0.0;
        assert_eq!(exact_prune_delta(&x, &w1, &w2, 0, 1).unwrap(), 0.0);
        assert!(exact_prune_delta(&x, &w1, &w2, 2, 0).is_err());
    }

    #[test]
    fn loss_shape_errors() {
        let (x, w1, w2) = appendix();
        assert!(foresight_loss(&Matrix::ones(2, 3), &w1, &w2, &x).is_err());
        assert!(foresight_loss(&Matrix::ones(2, 2), &w1, &Matrix::ones(3, 2), &x).is_err());
        assert!(foresight_scores(&w1, &Matrix::ones(3, 2), &[1.0, 1.0]).is_err());
    }
}
