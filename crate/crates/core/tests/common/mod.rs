#![allow(dead_code)]

use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use xpert_core::Matrix;

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

pub fn random_mask(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
}

/// Strategy for a matrix with the given shape and entries in `[-lim, lim]`.
pub fn matrix(rows: usize, cols: usize, lim: f64) -> impl Strategy<Value = Matrix> {
    proptest::collection::vec(-lim..lim, rows * cols).prop_map(move |d| Matrix::new(rows, cols, d).unwrap())
}

pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|k| a[(i, k)] * b[(k, j)]).sum())
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Modified Gram-Schmidt on the columns of `a`. Returns an orthonormal `rows × cols` matrix.
pub fn gram_schmidt(a: &Matrix) -> Matrix {
    let (m, n) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.col(j)).collect();
    for j in 0..n {
        for k in 0..j {
            let dot: f64 = (0..m).map(|t| cols[j][t] * cols[k][t]).sum();
            for t in 0..m {
                cols[j][t] -= dot * cols[k][t];
            }
        }
        let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm > 1e-12, "columns are linearly dependent");
        cols[j].iter_mut().for_each(|v| *v /= norm);
    }
    Matrix::from_fn(m, n, |i, j| cols[j][i])
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues descending, eigenvectors as columns.
pub fn symmetric_eigen(a: &Matrix) -> (Vec<f64>, Matrix) {
    let n = a.rows();
    let eig = nalgebra::SymmetricEigen::new(nalgebra::DMatrix::from_row_slice(n, n, a.data()));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    (values, Matrix::from_fn(n, n, |i, k| eig.eigenvectors[(i, order[k])]))
}
