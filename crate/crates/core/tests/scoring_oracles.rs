mod common;

use common::{matrix, random_matrix, rel_diff};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xpert_core::scoring::{
    exact_hessian_diag, exact_prune_delta, foresight_attention_scores, foresight_loss, foresight_scores,
    magnitude_scores, wanda_scores, AttentionSide,
};
use xpert_core::Matrix;

fn col_norms(x: &Matrix) -> Vec<f64> {
    (0..x.cols()).map(|i| (0..x.rows()).map(|t| x[(t, i)].powi(2)).sum::<f64>().sqrt()).collect()
}

fn single_zero(rows: usize, cols: usize, i: usize, j: usize) -> Matrix {
    let mut m = Matrix::ones(rows, cols);
    m[(i, j)] = 0.0;
    m
}

/// Indices sorted by value, ties by index.
fn argsort(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    idx
}

proptest! {
    #[test]
    fn foresight_matches_naive_loops(w1 in matrix(5, 4, 2.0), w2 in matrix(4, 3, 2.0), x in matrix(6, 5, 2.0)) {
        let norms = col_norms(&x);
        let s = foresight_scores(&w1, &w2, &norms).unwrap();
        for i in 0..5 {
            for j in 0..4 {
                let down: f64 = (0..3).map(|k| w2[(j, k)] * w2[(j, k)]).sum::<f64>().sqrt();
                let expected = w1[(i, j)].abs() * down * norms[i];
                prop_assert!((s.scores()[(i, j)] - expected).abs() <= 1e-12 * expected.max(1.0));
            }
        }
    }

    #[test]
    fn wanda_and_magnitude_match_naive_loops(w in matrix(4, 6, 3.0), x in matrix(3, 4, 3.0)) {
        let norms = col_norms(&x);
        let wanda = wanda_scores(&w, &norms).unwrap();
        let mag = magnitude_scores(&w);
        for i in 0..4 {
            for j in 0..6 {
                prop_assert_eq!(wanda.scores()[(i, j)], w[(i, j)].abs() * norms[i]);
                prop_assert_eq!(mag.scores()[(i, j)], w[(i, j)].abs());
            }
        }
    }

    #[test]
    fn attention_sides_use_row_and_column_norms(q in matrix(4, 3, 2.0), k in matrix(4, 3, 2.0), x in matrix(5, 4, 2.0)) {
        let norms = col_norms(&x);
        let qs = foresight_attention_scores(&q, &k, &norms, AttentionSide::Q).unwrap();
        let ks = foresight_attention_scores(&q, &k, &norms, AttentionSide::K).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let k_row: f64 = (0..3).map(|c| k[(j, c)].powi(2)).sum::<f64>().sqrt();
                let q_col: f64 = (0..4).map(|r| q[(r, j)].powi(2)).sum::<f64>().sqrt();
                prop_assert!((qs.scores()[(i, j)] - q[(i, j)].abs() * k_row * norms[i]).abs() < 1e-12);
                prop_assert!((ks.scores()[(i, j)] - k[(i, j)].abs() * q_col * norms[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scores_are_permutation_equivariant(w1 in matrix(5, 3, 2.0), w2 in matrix(3, 4, 2.0), x in matrix(4, 5, 2.0), shift in 1usize..5) {
        let norms = col_norms(&x);
        let perm: Vec<usize> = (0..5).map(|i| (i + shift) % 5).collect();
        let w1p = w1.select_rows(&perm).unwrap();
        let norms_p: Vec<f64> = perm.iter().map(|&i| norms[i]).collect();
        let base = foresight_scores(&w1, &w2, &norms).unwrap();
        let permuted = foresight_scores(&w1p, &w2, &norms_p).unwrap();
        prop_assert_eq!(permuted.scores(), &base.scores().select_rows(&perm).unwrap());
        let wb = wanda_scores(&w1, &norms).unwrap();
        let wp = wanda_scores(&w1p, &norms_p).unwrap();
        prop_assert_eq!(wp.scores(), &wb.scores().select_rows(&perm).unwrap());
    }

    #[test]
    fn single_row_prune_delta_is_score_squared(u1 in matrix(4, 3, 2.0), u2 in matrix(3, 5, 2.0), x in matrix(1, 4, 2.0)) {
        let s = foresight_scores(&u1, &u2, &col_norms(&x)).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let delta = exact_prune_delta(&x, &u1, &u2, i, j).unwrap();
                let sq = s.scores()[(i, j)].powi(2);
                prop_assert!((delta - sq).abs() <= 1e-10 * sq.max(1.0), "{} vs {}", delta, sq);
            }
        }
    }

    #[test]
    fn diagonal_gram_prune_delta_is_score_squared(u1 in matrix(3, 3, 2.0), u2 in matrix(3, 2, 2.0), d in proptest::collection::vec(0.1f64..3.0, 3)) {
        // X with orthogonal columns: rows 0..3 form diag(d), row 3 is zero
        let x = Matrix::from_fn(4, 3, |t, i| if t == i { d[i] } else { 0.0 });
        let s = foresight_scores(&u1, &u2, &col_norms(&x)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let delta = exact_prune_delta(&x, &u1, &u2, i, j).unwrap();
                let sq = s.scores()[(i, j)].powi(2);
                prop_assert!((delta - sq).abs() <= 1e-10 * sq.max(1.0));
            }
        }
    }

    #[test]
    fn refinement_never_lowers_loss_on_nonnegative_single_row(
        u1 in matrix(4, 4, 2.0),
        u2 in matrix(4, 3, 2.0),
        x in matrix(1, 4, 2.0),
        order in Just((0..16).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let (u1, u2, x) = (u1.map(f64::abs), u2.map(f64::abs), x.map(f64::abs));
        let mut mask = Matrix::ones(4, 4);
        let mut prev = 0.0f64;
        for idx in order {
            mask[(idx / 4, idx % 4)] = 0.0;
            let loss = foresight_loss(&mask, &u1, &u2, &x).unwrap();
            prop_assert!(loss >= prev - 1e-12 * prev.max(1.0));
            prev = loss;
        }
    }
}

#[test]
fn refinement_can_lower_loss_when_contributions_cancel() {
    // two pruned entries of opposite downstream sign cancel in the output
    let x = Matrix::from_rows(&[[1.0]]);
    let u1 = Matrix::from_rows(&[[1.0, 1.0]]);
    let u2 = Matrix::from_rows(&[[1.0], [-1.0]]);
    let one = foresight_loss(&Matrix::from_rows(&[[0.0, 1.0]]), &u1, &u2, &x).unwrap();
    let both = foresight_loss(&Matrix::from_rows(&[[0.0, 0.0]]), &u1, &u2, &x).unwrap();
    assert_eq!((one, both), (1.0, 0.0));
}

#[test]
fn hessian_diag_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..60 {
        let (t, m, n, p) = (rng.gen_range(1..7), rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6));
        let x = random_matrix(&mut rng, t, m);
        let u1 = random_matrix(&mut rng, m, n);
        let u2 = random_matrix(&mut rng, n, p);
        let (i, j) = (rng.gen_range(0..m), rng.gen_range(0..n));
        // loss of the forward composition as a function of the single entry u1[i][j]
        let loss = |theta: f64| {
            let mut w = u1.clone();
            w[(i, j)] = theta;
            common::naive_matmul(&common::naive_matmul(&x, &w), &u2).frobenius_sq()
        };
        let h = 1e-3;
        let theta = u1[(i, j)];
        let fd = (loss(theta + h) - 2.0 * loss(theta) + loss(theta - h)) / (h * h);
        let exact = exact_hessian_diag(&x, &u2, i, j).unwrap();
        if exact < 1e-12 {
            assert!(fd.abs() < 1e-6);
            continue;
        }
        assert!(rel_diff(fd, exact) < 1e-6, "fd {fd} exact {exact}");
    }
}

#[test]
fn ranking_matches_hessian_weighted_saliency() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut checked = 0;
    while checked < 60 {
        let (t, m, n, p) = (rng.gen_range(1..8), rng.gen_range(2..6), rng.gen_range(2..6), rng.gen_range(1..6));
        let x = random_matrix(&mut rng, t, m);
        let u1 = random_matrix(&mut rng, m, n);
        let u2 = random_matrix(&mut rng, n, p);
        let scores = foresight_scores(&u1, &u2, &col_norms(&x)).unwrap();
        let mut saliency = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                let gram: f64 = (0..t).map(|r| x[(r, i)] * x[(r, i)]).sum();
                let energy: f64 = (0..p).map(|c| u2[(j, c)] * u2[(j, c)]).sum();
                saliency.push(u1[(i, j)].powi(2) * gram * energy);
            }
        }
        let mut sorted = saliency.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[1] - w[0] <= 1e-9 * w[1].abs()) {
            continue;
        }
        assert_eq!(argsort(scores.scores().data()), argsort(&saliency));
        checked += 1;
    }
}

#[test]
fn appendix_losses_and_scores() {
    let x = Matrix::from_rows(&[[3.0, 6.0]]);
    let w1 = Matrix::from_rows(&[[2.0, 2.0], [4.0, 1.0]]);
    let w2 = Matrix::from_rows(&[[4.0, 4.0], [8.0, 1.0]]);
    let a = single_zero(2, 2, 0, 0);
    let b = single_zero(2, 2, 1, 1);
    assert_eq!(xpert_core::scoring::local_loss(&a, &w1, &x).unwrap(), 36.0);
    assert_eq!(xpert_core::scoring::local_loss(&b, &w1, &x).unwrap(), 36.0);
    assert_eq!(foresight_loss(&a, &w1, &w2, &x).unwrap(), 1152.0);
    assert_eq!(foresight_loss(&b, &w1, &w2, &x).unwrap(), 2340.0);
}
