//! Subspace analytics for adapters, relative-performance aggregation, and the two-layer
//! error-propagation demonstration.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Result, XpertError};
use crate::matrix::Matrix;
use crate::svd::svd;
use crate::scoring::{foresight_loss, foresight_scores, local_loss, wanda_scores};

/// Overshoot of a principal cosine above 1 that is worth a log line.
const CLAMP_LOG_THRESHOLD: f64 = 1e-6;
const SPECTRAL_GAP_TOLERANCE: f64 = 1e-10;
/// Relative size below which the r-th singular value counts as zero.
const RANK_TOLERANCE: f64 = 1e-12;

fn check_rank(r: usize, m: &Matrix) -> Result<()> {
    let max = m.rows().min(m.cols());
    if r == 0 || r > max {
        return Err(XpertError::param("r", r, "must satisfy 1 <= r <= min(rows, cols)"));
    }
    Ok(())
}

/// Two `n × r` orthonormal bases.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspacePair {
    left: Matrix,
    right: Matrix,
}

impl SubspacePair {
    pub fn new(left: Matrix, right: Matrix) -> Result<Self> {
        if left.shape() != right.shape() {
            return Err(XpertError::shape(
                "SubspacePair",
                format!("{}x{}", left.rows(), left.cols()),
                format!("{}x{}", right.rows(), right.cols()),
            ));
        }
        for (name, q) in [("left", &left), ("right", &right)] {
            let gram = q.transpose().matmul(q)?;
            let dev = gram.sub(&Matrix::identity(q.cols()))?.max_abs();
            if dev > 1e-8 {
                return Err(XpertError::Degenerate(format!(
                    "{name} basis is not orthonormal (max |QᵀQ − I| = {dev:e})"
                )));
            }
        }
        Ok(SubspacePair { left, right })
    }

    /// Top-`r` left singular bases of two adapter products.
    pub fn from_products(ba1: &Matrix, ba2: &Matrix, r: usize) -> Result<Self> {
        if ba1.shape() != ba2.shape() {
            return Err(XpertError::shape(
                "grassmann_distance",
                format!("{}x{}", ba1.rows(), ba1.cols()),
                format!("{}x{}", ba2.rows(), ba2.cols()),
            ));
        }
        check_rank(r, ba1)?;
        let left = principal_basis(ba1, r)?;
        let right = principal_basis(ba2, r)?;
        Self::new(left, right)
    }

    pub fn left(&self) -> &Matrix {
        &self.left
    }

    pub fn right(&self) -> &Matrix {
        &self.right
    }

    /// Cosines of the principal angles, clamped to `[0, 1]`, descending.
    pub fn principal_cosines(&self) -> Vec<f64> {
        let cross = self.left.transpose().matmul(&self.right).expect("matching bases");
        let sv = match svd(&cross) {
            Ok(d) => d.sigma,
            Err(e) => {
                log::warn!("principal cosines unavailable ({e}); reporting orthogonal subspaces");
                vec![0.0; cross.cols()]
            }
        };
        sv.into_iter()
            .map(|s| {
                if s - 1.0 > CLAMP_LOG_THRESHOLD {
                    log::warn!("principal cosine {s} clamped to 1 (overshoot {:e})", s - 1.0);
                }
                s.clamp(0.0, 1.0)
            })
            .collect()
    }

    pub fn distance(&self) -> f64 {
        self.principal_cosines()
            .into_iter()
            .map(|c| c.acos().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

fn principal_basis(m: &Matrix, r: usize) -> Result<Matrix> {
    let d = svd(m)?;
    let top = d.sigma[0];
    if top == 0.0 {
        return Err(XpertError::Degenerate("zero matrix has no principal basis".into()));
    }
    if d.sigma[r - 1] <= RANK_TOLERANCE * top {
        return Err(XpertError::Degenerate(format!(
            "matrix rank is below r = {r} (sigma_r / sigma_1 = {:e})",
            d.sigma[r - 1] / top
        )));
    }
    d.u.select_cols(&(0..r).collect::<Vec<_>>())
}

/// Grassmann distance between the top-`r` left singular subspaces of two adapter products.
pub fn grassmann_distance(ba1: &Matrix, ba2: &Matrix, r: usize) -> Result<f64> {
    Ok(SubspacePair::from_products(ba1, ba2, r)?.distance())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionEnergy {
    /// Fraction of `‖BA‖²_F` inside the span of the top-`r` right singular vectors of `W`.
    pub energy: f64,
    /// Set when `σ_r` and `σ_{r+1}` of `W` are too close for the span to be well defined.
    pub warning: Option<String>,
}

/// `‖BA · V Vᵀ‖²_F / ‖BA‖²_F` with `V` the top-`r` right singular vectors of `w`.
pub fn projection_energy(ba: &Matrix, w: &Matrix, r: usize) -> Result<ProjectionEnergy> {
    if ba.shape() != w.shape() {
        return Err(XpertError::shape(
            "projection_energy",
            format!("{}x{}", w.rows(), w.cols()),
            format!("{}x{}", ba.rows(), ba.cols()),
        ));
    }
    check_rank(r, w)?;
    let total = ba.frobenius_sq();
    if total == 0.0 {
        return Err(XpertError::Degenerate("adapter product has zero energy".into()));
    }
    let d = svd(w)?;
    let v = d.v.select_cols(&(0..r).collect::<Vec<_>>())?;
    // ‖BA·V·Vᵀ‖_F = ‖BA·V‖_F since V has orthonormal columns
    let energy = (ba.matmul(&v)?.frobenius_sq() / total).clamp(0.0, 1.0);
    let warning = d.sigma.get(r).and_then(|&next| {
        let gap = d.sigma[r - 1] - next;
        (gap <= SPECTRAL_GAP_TOLERANCE).then(|| {
            format!("sigma_r and sigma_(r+1) of the base weight differ by {gap:e}; the top-r span is not unique")
        })
    });
    Ok(ProjectionEnergy { energy, warning })
}

/// Metric group name (e.g. `acc`, `f1`, `rouge`) to per-task values.
pub type MetricSet = BTreeMap<String, Vec<f64>>;

/// Mean pruned/dense ratio per group, summed over groups, × 100 / number of groups.
pub fn relative_performance(pruned: &MetricSet, dense: &MetricSet) -> Result<f64> {
    if pruned.is_empty() {
        return Err(XpertError::param("metrics", "{}", "at least one metric group is required"));
    }
    if pruned.keys().ne(dense.keys()) {
        return Err(XpertError::InvalidModel(format!(
            "metric groups differ: pruned {:?} vs dense {:?}",
            pruned.keys().collect::<Vec<_>>(),
            dense.keys().collect::<Vec<_>>()
        )));
    }
    let mut total = 0.0;
    for (name, p) in pruned {
        let d = &dense[name];
        if p.len() != d.len() || p.is_empty() {
            return Err(XpertError::shape(
                "relative_performance",
                format!("{} values in group {name}", d.len()),
                format!("{}", p.len()),
            ));
        }
        let mut sum = 0.0;
        for (pv, dv) in p.iter().zip(d) {
            if !(*dv > 0.0) || !dv.is_finite() || !pv.is_finite() {
                return Err(XpertError::param("dense metric", dv, "must be finite and positive"));
            }
            sum += pv / dv;
        }
        total += sum / p.len() as f64;
    }
    Ok(total * 100.0 / pruned.len() as f64)
}

/// One pruned entry of the two-layer example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunedEntry {
    pub row: usize,
    pub col: usize,
    pub weight: f64,
    pub local_loss: f64,
    pub downstream_loss: f64,
    pub wanda_score: f64,
    pub foresight_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagationReport {
    pub x: Matrix,
    pub w1: Matrix,
    pub w2: Matrix,
    pub hidden: Matrix,
    pub output: Matrix,
    pub entries: Vec<PrunedEntry>,
}

impl PropagationReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "two-layer error propagation");
        let _ = writeln!(out, "X = {:?}", self.x.row(0));
        let _ = writeln!(out, "W1 = {:?}", rows_of(&self.w1));
        let _ = writeln!(out, "W2 = {:?}", rows_of(&self.w2));
        let _ = writeln!(out, "X·W1 = {:?}, X·W1·W2 = {:?}", self.hidden.row(0), self.output.row(0));
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "{:<8} {:>6} {:>10} {:>15} {:>11} {:>15}",
            "entry", "weight", "local_loss", "downstream_loss", "wanda_score", "foresight_score"
        );
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{:<8} {:>6} {:>10} {:>15} {:>11} {:>15.3}",
                format!("W1[{},{}]", e.row, e.col),
                e.weight,
                e.local_loss,
                e.downstream_loss,
                e.wanda_score,
                e.foresight_score
            );
        }
        out
    }
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// Evaluates local vs downstream loss and Wanda vs ForeSight scores for pruning one
/// entry of `w1` at a time.
pub fn propagation_report(x: &Matrix, w1: &Matrix, w2: &Matrix, entries: &[(usize, usize)]) -> Result<PropagationReport> {
    let hidden = x.matmul(w1)?;
    let output = hidden.matmul(w2)?;
    let norms = x.col_norms();
    let fs = foresight_scores(w1, w2, &norms)?;
    let wa = wanda_scores(w1, &norms)?;
    let mut rows = Vec::with_capacity(entries.len());
    for &(i, j) in entries {
        let weight = w1.get(i, j)?;
        let mut mask = Matrix::ones(w1.rows(), w1.cols());
        mask[(i, j)] = 0.0;
        rows.push(PrunedEntry {
            row: i,
            col: j,
            weight,
            local_loss: local_loss(&mask, w1, x)?,
            downstream_loss: foresight_loss(&mask, w1, w2, x)?,
            wanda_score: wa.scores()[(i, j)],
            foresight_score: fs.scores()[(i, j)],
        });
    }
    Ok(PropagationReport {
        x: x.clone(),
        w1: w1.clone(),
        w2: w2.clone(),
        hidden,
        output,
        entries: rows,
    })
}

/// The classic instance: two entries with equal local loss but very different
/// downstream loss.
pub fn propagation_demo() -> PropagationReport {
    let x = Matrix::from_rows(&[[3.0, 6.0]]);
    let w1 = Matrix::from_rows(&[[2.0, 2.0], [4.0, 1.0]]);
    let w2 = Matrix::from_rows(&[[4.0, 4.0], [8.0, 1.0]]);
    propagation_report(&x, &w1, &w2, &[(0, 0), (1, 1)]).expect("fixed instance is well formed")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_numbers() {
        let r = propagation_demo();
        assert_eq!(r.entries[0].local_loss, 36.0);
        assert_eq!(r.entries[1].local_loss, 36.0);
        assert_eq!(r.entries[0].downstream_loss, 1152.0);
        assert_eq!(r.entries[1].downstream_loss, 2340.0);
        assert_eq!(r.entries[0].wanda_score, 6.0);
        assert_eq!(r.entries[1].wanda_score, 6.0);
        assert!(r.entries[0].foresight_score < r.entries[1].foresight_score);
        let text = r.to_text();
        for needle in ["36", "1152", "2340"] {
            assert!(text.contains(needle), "{text}");
        }
    }

    #[test]
    fn orthogonal_lines() {
        let a = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0], [0.0, 0.0]]);
        let b = Matrix::from_rows(&[[0.0, 0.0], [2.0, 0.0], [0.0, 0.0]]);
        let d = grassmann_distance(&a, &b, 1).unwrap();
        assert!((d - std::f64::consts::FRAC_PI_2).abs() < 1e-8);
    }

    #[test]
    fn zero_input_is_degenerate() {
        let z = Matrix::zeros(4, 4);
        let a = Matrix::identity(4);
        assert!(matches!(grassmann_distance(&z, &a, 2), Err(XpertError::Degenerate(_))));
        assert!(matches!(projection_energy(&z, &a, 2), Err(XpertError::Degenerate(_))));
        assert!(grassmann_distance(&a, &a, 5).is_err());
    }

    #[test]
    fn projection_limits() {
        let w = Matrix::from_rows(&[[3.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]]);
        let inside = Matrix::from_rows(&[[1.0, 5.0, 0.0], [0.0, -1.0, 0.0], [2.0, 0.0, 0.0]]);
        let outside = Matrix::from_rows(&[[0.0, 0.0, 1.0], [0.0, 0.0, 4.0], [0.0, 0.0, 0.0]]);
        let pe = projection_energy(&inside, &w, 2).unwrap();
        assert!((pe.energy - 1.0).abs() < 1e-10);
        assert!(pe.warning.is_none());
        assert!(projection_energy(&outside, &w, 2).unwrap().energy.abs() < 1e-10);
        let flat = Matrix::identity(3);
        assert!(projection_energy(&inside, &flat, 2).unwrap().warning.is_some());
    }

    #[test]
    fn rel_perf_exact_values() {
        let dense: MetricSet = [
            ("acc".to_string(), vec![0.8, 0.6]),
            ("f1".to_string(), vec![0.7, 0.5]),
            ("rouge".to_string(), vec![0.4, 0.2, 0.3]),
        ]
        .into_iter()
        .collect();
        assert_eq!(relative_performance(&dense, &dense).unwrap(), 100.0);
        let halved: MetricSet = dense.iter().map(|(k, v)| (k.clone(), v.iter().map(|x| x / 2.0).collect())).collect();
        assert_eq!(relative_performance(&halved, &dense).unwrap(), 50.0);
        let better: MetricSet = dense.iter().map(|(k, v)| (k.clone(), v.iter().map(|x| x * 1.07).collect())).collect();
        assert!(relative_performance(&better, &dense).unwrap() > 100.0);
    }

    #[test]
    fn rel_perf_errors() {
        let dense: MetricSet = [("acc".to_string(), vec![0.0])].into_iter().collect();
        assert!(relative_performance(&dense, &dense).is_err());
        let a: MetricSet = [("acc".to_string(), vec![1.0])].into_iter().collect();
        let b: MetricSet = [("f1".to_string(), vec![1.0])].into_iter().collect();
        assert!(relative_performance(&a, &b).is_err());
        assert!(relative_performance(&MetricSet::new(), &MetricSet::new()).is_err());
    }
}
