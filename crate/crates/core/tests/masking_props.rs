mod common;

use common::{matrix, random_mask, random_matrix};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xpert_core::masking::{
    apply_mask, ema_update, global_prune, mask_churn, prune_count, rowwise_prune, sparsity_of, ScoreState,
};
use xpert_core::model::{Activation, LoraLinear, ToyModel};
use xpert_core::scoring::{Criterion, ScoreMatrix};
use xpert_core::{forward, Matrix};

fn scores(m: Matrix) -> ScoreMatrix {
    ScoreMatrix::new(m.map(f64::abs), Criterion::Foresight).unwrap()
}

fn zeros_per_row(mask: &Matrix) -> Vec<usize> {
    (0..mask.rows()).map(|i| mask.row(i).iter().filter(|v| **v == 0.0).count()).collect()
}

fn random_layer(rng: &mut ChaCha8Rng, m: usize, n: usize, r: usize) -> LoraLinear {
    LoraLinear::new(random_matrix(rng, m, n), random_matrix(rng, m, r), random_matrix(rng, r, n), 2.0).unwrap()
}

proptest! {
    #[test]
    fn exact_floor_count_per_row(
        (m, n) in (1usize..12, 1usize..40),
        tenths in 1usize..10,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = tenths as f64 / 10.0;
        let mask = rowwise_prune(&scores(random_matrix(&mut rng, m, n)), s).unwrap();
        let k = (s * n as f64).floor() as usize;
        prop_assert!(zeros_per_row(&mask).iter().all(|&z| z == k));
        prop_assert!(mask.data().iter().all(|v| *v == 0.0 || *v == 1.0));
    }

    #[test]
    fn pruned_entries_never_outscore_kept_ones(w in matrix(6, 9, 5.0), s in 0.0f64..0.99) {
        let sc = scores(w);
        let mask = rowwise_prune(&sc, s).unwrap();
        for i in 0..6 {
            let pruned_max = (0..9).filter(|&j| mask[(i, j)] == 0.0).map(|j| sc.scores()[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
            let kept_min = (0..9).filter(|&j| mask[(i, j)] == 1.0).map(|j| sc.scores()[(i, j)]).fold(f64::INFINITY, f64::min);
            prop_assert!(pruned_max <= kept_min);
        }
    }

    #[test]
    fn higher_sparsity_prunes_a_superset(w in matrix(5, 12, 5.0), s1 in 0.0f64..0.99, s2 in 0.0f64..0.99) {
        let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
        let sc = scores(w);
        let a = rowwise_prune(&sc, lo).unwrap();
        let b = rowwise_prune(&sc, hi).unwrap();
        prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| !(*x == 0.0 && *y == 1.0)));
    }

    #[test]
    fn masks_are_scale_invariant(w in matrix(4, 10, 5.0), c in 1e-3f64..1e3, s in 0.0f64..0.99) {
        let sc = scores(w);
        let scaled = ScoreMatrix::new(sc.scores().scaled(c), Criterion::Foresight).unwrap();
        prop_assert_eq!(rowwise_prune(&sc, s).unwrap(), rowwise_prune(&scaled, s).unwrap());
    }

    #[test]
    fn global_budget_prunes_exact_total(w in matrix(5, 7, 5.0), s in 0.0f64..0.99) {
        let mask = global_prune(&scores(w), s).unwrap();
        let zeros = mask.data().iter().filter(|v| **v == 0.0).count();
        prop_assert_eq!(zeros, prune_count(s, 35));
    }

    #[test]
    fn ema_is_a_convex_blend(a in matrix(3, 4, 5.0), b in matrix(3, 4, 5.0), eta in 0.01f64..1.0) {
        let (a, b) = (scores(a), scores(b));
        let first = ema_update(&ScoreState::new(eta).unwrap(), a.clone()).unwrap();
        prop_assert_eq!(first.smoothed().unwrap().scores(), a.scores());
        let second = ema_update(&first, b.clone()).unwrap();
        let s = second.smoothed().unwrap().scores();
        for k in 0..12 {
            let (x, y) = (a.scores().data()[k], b.scores().data()[k]);
            let expected = eta * y + (1.0 - eta) * x;
            prop_assert!((s.data()[k] - expected).abs() <= 1e-12 * expected.max(1.0));
            prop_assert!(s.data()[k] >= x.min(y) - 1e-12 && s.data()[k] <= x.max(y) + 1e-12);
        }
        prop_assert_eq!(second.epoch(), 2);
    }
}

#[test]
fn masked_forward_equals_explicitly_zeroed_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let l0 = random_layer(&mut rng, 6, 8, 2);
        let l1 = random_layer(&mut rng, 8, 5, 2);
        let (m0, m1) = (random_mask(&mut rng, 6, 8), random_mask(&mut rng, 8, 5));
        let masked = ToyModel::chain(
            vec![apply_mask(&l0, &m0).unwrap(), apply_mask(&l1, &m1).unwrap()],
            vec![Activation::Relu],
        )
        .unwrap();

        let zeroed = |l: &LoraLinear, m: &Matrix| {
            let w = l.compose_effective().hadamard(m).unwrap();
            LoraLinear::new(w, Matrix::zeros(l.in_dim(), 1), Matrix::zeros(1, l.out_dim()), 0.0).unwrap()
        };
        let explicit = ToyModel::chain(vec![zeroed(&l0, &m0), zeroed(&l1, &m1)], vec![Activation::Relu]).unwrap();
        let x = random_matrix(&mut rng, 7, 6);
        let (a, _) = forward(&masked, &x).unwrap();
        let (b, _) = forward(&explicit, &x).unwrap();
        assert_eq!(common::max_abs_diff(&a, &b), 0.0);
    }
}

#[test]
fn all_ones_mask_leaves_forward_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let l0 = random_layer(&mut rng, 5, 6, 2);
    let l1 = random_layer(&mut rng, 6, 3, 2);
    let plain = ToyModel::chain(vec![l0.clone(), l1.clone()], vec![Activation::Relu]).unwrap();
    let ones = ToyModel::chain(
        vec![apply_mask(&l0, &Matrix::ones(5, 6)).unwrap(), apply_mask(&l1, &Matrix::ones(6, 3)).unwrap()],
        vec![Activation::Relu],
    )
    .unwrap();
    let x = random_matrix(&mut rng, 4, 5);
    assert_eq!(forward(&plain, &x).unwrap().0, forward(&ones, &x).unwrap().0);
}

#[test]
fn sparsity_and_churn_accounting() {
    let a = Matrix::from_rows(&[[1.0, 0.0, 1.0, 0.0]]);
    let b = Matrix::from_rows(&[[0.0, 0.0, 1.0, 1.0]]);
    assert_eq!(sparsity_of(&a).unwrap(), 0.5);
    assert_eq!(mask_churn(&a, &b).unwrap(), 0.5);
    assert_eq!(mask_churn(&a, &a).unwrap(), 0.0);
    assert!(sparsity_of(&Matrix::from_rows(&[[0.5]])).is_err());
}

#[test]
fn ties_prune_lower_columns_first() {
    let flat = ScoreMatrix::new(Matrix::ones(2, 4), Criterion::Wanda).unwrap();
    let mask = rowwise_prune(&flat, 0.5).unwrap();
    assert_eq!(mask, Matrix::from_rows(&[[0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 1.0, 1.0]]));
}
