//! Score smoothing across epochs and score-to-mask conversion.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Result, XpertError};
use crate::matrix::Matrix;
use crate::model::{ensure_binary, LoraLinear};
use crate::par::Parallelism;
use crate::scoring::ScoreMatrix;

/// EMA-smoothed scores for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreState {
    smoothed: Option<ScoreMatrix>,
    epoch: usize,
    ema_rate: f64,
}

impl ScoreState {
    pub fn new(ema_rate: f64) -> Result<Self> {
        if !(ema_rate > 0.0 && ema_rate <= 1.0) {
            return Err(XpertError::param("ema_rate", ema_rate, "must lie in (0, 1]"));
        }
        Ok(ScoreState {
            smoothed: None,
            epoch: 0,
            ema_rate,
        })
    }

    pub fn smoothed(&self) -> Option<&ScoreMatrix> {
        self.smoothed.as_ref()
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn ema_rate(&self) -> f64 {
        self.ema_rate
    }
}

/// `smoothed ← η · fresh + (1 − η) · smoothed`; the first update adopts `fresh` as is.
pub fn ema_update(state: &ScoreState, fresh: ScoreMatrix) -> Result<ScoreState> {
    let eta = state.ema_rate;
    let smoothed = match &state.smoothed {
        None => fresh,
        Some(prev) => {
            if prev.shape() != fresh.shape() {
                return Err(XpertError::shape(
                    "ema_update",
                    format!("{}x{}", prev.shape().0, prev.shape().1),
                    format!("{}x{}", fresh.shape().0, fresh.shape().1),
                ));
            }
            let blended = fresh
                .scores()
                .scaled(eta)
                .add(&prev.scores().scaled(1.0 - eta))?;
            ScoreMatrix::new(blended, fresh.criterion())?
        }
    };
    Ok(ScoreState {
        smoothed: Some(smoothed),
        epoch: state.epoch + 1,
        ema_rate: eta,
    })
}

fn check_sparsity(s: f64) -> Result<()> {
    if !(0.0..1.0).contains(&s) {
        return Err(XpertError::param("sparsity", s, "must lie in [0, 1)"));
    }
    Ok(())
}

/// Number of entries pruned from a row of length `n` at sparsity `s`.
pub fn prune_count(s: f64, n: usize) -> usize {
    (s * n as f64).floor() as usize
}

fn ascending(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[a].total_cmp(&scores[b]).then(a.cmp(&b))
}

/// Zeroes the `floor(s · n)` lowest-scoring entries of every row. Ties prune the lower
/// column index first.
pub fn rowwise_prune(scores: &ScoreMatrix, sparsity: f64) -> Result<Matrix> {
    rowwise_prune_with(scores, sparsity, Parallelism::Sequential)
}

pub fn rowwise_prune_with(scores: &ScoreMatrix, sparsity: f64, par: Parallelism) -> Result<Matrix> {
    check_sparsity(sparsity)?;
    let s = scores.scores();
    let (m, n) = s.shape();
    let k = prune_count(sparsity, n);
    let rows = par.map(m, |i| {
        let row = s.row(i);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| ascending(row, a, b));
        let mut mask = vec![1.0; n];
        for &j in &order[..k] {
            mask[j] = 0.0;
        }
        mask
    });
    Ok(Matrix::new(m, n, rows.into_iter().flatten().collect()).expect("binary mask"))
}

/// Zeroes the `floor(s · m · n)` lowest-scoring entries of the whole matrix. Ties prune
/// the lower flat index first. Not the default: row budgets are.
pub fn global_prune(scores: &ScoreMatrix, sparsity: f64) -> Result<Matrix> {
    check_sparsity(sparsity)?;
    let s = scores.scores();
    let (m, n) = s.shape();
    let k = prune_count(sparsity, m * n);
    let mut order: Vec<usize> = (0..m * n).collect();
    order.sort_by(|&a, &b| ascending(s.data(), a, b));
    let mut data = vec![1.0; m * n];
    for &idx in &order[..k] {
        data[idx] = 0.0;
    }
    Ok(Matrix::new(m, n, data).expect("binary mask"))
}

/// Returns `layer` with `mask` installed; forwards then use `M ⊙ (W + scale·BA)`.
pub fn apply_mask(layer: &LoraLinear, mask: &Matrix) -> Result<LoraLinear> {
    let mut out = layer.clone();
    out.set_mask(mask.clone())?;
    Ok(out)
}

/// Fraction of zero entries in a binary mask.
pub fn sparsity_of(mask: &Matrix) -> Result<f64> {
    ensure_binary(mask)?;
    let zeros = mask.data().iter().filter(|v| **v == 0.0).count();
    Ok(zeros as f64 / mask.data().len() as f64)
}

/// Fraction of entries that differ between two masks of the same shape.
pub fn mask_churn(previous: &Matrix, current: &Matrix) -> Result<f64> {
    if previous.shape() != current.shape() {
        return Err(XpertError::shape(
            "mask_churn",
            format!("{}x{}", previous.rows(), previous.cols()),
            format!("{}x{}", current.rows(), current.cols()),
        ));
    }
    let flipped = previous
        .data()
        .iter()
        .zip(current.data())
        .filter(|(a, b)| a != b)
        .count();
    Ok(flipped as f64 / previous.data().len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scoring::Criterion;

    fn sm(m: Matrix) -> ScoreMatrix {
        ScoreMatrix::new(m, Criterion::Foresight).unwrap()
    }

    #[test]
    fn ema_rate_one_takes_fresh() {
        let state = ema_update(&ScoreState::new(1.0).unwrap(), sm(Matrix::filled(2, 2, 7.0))).unwrap();
        let fresh = sm(Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        let next = ema_update(&state, fresh.clone()).unwrap();
        assert_eq!(next.smoothed().unwrap(), &fresh);
        assert_eq!(next.epoch(), 2);
    }

    #[test]
    fn ema_half_blend() {
        let state = ema_update(&ScoreState::new(0.5).unwrap(), sm(Matrix::filled(2, 3, 2.0))).unwrap();
        assert_eq!(state.epoch(), 1);
        let next = ema_update(&state, sm(Matrix::filled(2, 3, 4.0))).unwrap();
        assert_eq!(next.smoothed().unwrap().scores(), &Matrix::filled(2, 3, 3.0));
    }

    #[test]
    fn ema_converges_geometrically() {
        let eta = 0.3;
        let mut state = ema_update(&ScoreState::new(eta).unwrap(), sm(Matrix::filled(1, 1, 10.0))).unwrap();
        let mut gap = 9.0;
        for _ in 0..20 {
            state = ema_update(&state, sm(Matrix::filled(1, 1, 1.0))).unwrap();
            let new_gap = state.smoothed().unwrap().scores()[(0, 0)] - 1.0;
            assert!((new_gap - gap * (1.0 - eta)).abs() < 1e-12);
            gap = new_gap;
        }
    }

    #[test]
    fn ema_errors() {
        assert!(ScoreState::new(0.0).is_err());
        assert!(ScoreState::new(1.5).is_err());
        let state = ema_update(&ScoreState::new(0.5).unwrap(), sm(Matrix::ones(2, 2))).unwrap();
        assert!(ema_update(&state, sm(Matrix::ones(2, 3))).is_err());
    }

    #[test]
    fn rowwise_examples() {
        let s = sm(Matrix::from_rows(&[[5.0, 1.0, 3.0, 2.0]]));
        assert_eq!(rowwise_prune(&s, 0.5).unwrap(), Matrix::from_rows(&[[1.0, 0.0, 1.0, 0.0]]));
        assert_eq!(rowwise_prune(&s, 0.0).unwrap(), Matrix::ones(1, 4));
        assert!(rowwise_prune(&s, 1.0).is_err());
        assert!(rowwise_prune(&s, -0.1).is_err());
    }

    #[test]
    fn rowwise_ties_prune_lowest_column() {
        let s = sm(Matrix::from_rows(&[[2.0, 2.0, 2.0, 2.0]]));
        assert_eq!(rowwise_prune(&s, 0.5).unwrap(), Matrix::from_rows(&[[0.0, 0.0, 1.0, 1.0]]));
    }

    #[test]
    fn global_budget() {
        let s = sm(Matrix::from_rows(&[[1.0, 2.0], [3.0, 0.5]]));
        assert_eq!(global_prune(&s, 0.5).unwrap(), Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]));
    }

    #[test]
    fn sparsity_accounting() {
        assert_eq!(sparsity_of(&Matrix::ones(3, 3)).unwrap(), 0.0);
        let m = Matrix::from_fn(4, 4, |i, j| ((i + j) % 2) as f64);
        assert_eq!(sparsity_of(&m).unwrap(), 0.5);
        let scores = sm(Matrix::from_fn(5, 10, |i, j| ((i * 7 + j * 3) % 11) as f64));
        assert_eq!(sparsity_of(&rowwise_prune(&scores, 0.4).unwrap()).unwrap(), 0.4);
        assert!(sparsity_of(&Matrix::filled(2, 2, 0.5)).is_err());
    }

    #[test]
    fn churn() {
        let a = Matrix::from_rows(&[[1.0, 0.0, 1.0, 0.0]]);
        let b = Matrix::from_rows(&[[1.0, 1.0, 0.0, 0.0]]);
        assert_eq!(mask_churn(&a, &b).unwrap(), 0.5);
        assert_eq!(mask_churn(&a, &a).unwrap(), 0.0);
    }
}
