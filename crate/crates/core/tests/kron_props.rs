//! Randomized identities for the Kronecker / vec / Π helpers.

use nalgebra::DMatrix;
use proptest::prelude::*;
use tlsekit::kron::{kron, permute_cols, permute_rows, pinv_default, unvec, vec, vec_permutation};

fn matrix(rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> impl Strategy<Value = DMatrix<f64>> {
    (rows, cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-10.0f64..10.0, r * c).prop_map(move |v| DMatrix::from_vec(r, c, v))
    })
}

fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    a.shape() == b.shape() && (a - b).amax() <= tol * (1.0 + a.amax().max(b.amax()))
}

proptest! {
    #[test]
    fn vec_unvec_round_trip(a in matrix(1..6, 1..6)) {
        prop_assert_eq!(unvec(&vec(&a), a.nrows(), a.ncols()), a);
    }

    #[test]
    fn vec_of_product_is_kron_times_vec(
        (a, x, b) in (1usize..5, 1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(p, m, n, q)| {
            (matrix(p..p + 1, m..m + 1), matrix(m..m + 1, n..n + 1), matrix(n..n + 1, q..q + 1))
        })
    ) {
        // vec(A X B) = (Bᵀ ⊗ A) vec(X)
        let lhs = vec(&(&a * &x * &b));
        let rhs = kron(&b.transpose(), &a) * vec(&x);
        prop_assert!(close(&DMatrix::from_column_slice(lhs.len(), 1, lhs.as_slice()),
                           &DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice()), 1e-12));
    }

    #[test]
    fn vec_permutation_transposes(a in matrix(1..6, 1..6)) {
        let (m, n) = a.shape();
        prop_assert_eq!(vec_permutation(m, n) * vec(&a), vec(&a.transpose()));
    }

    #[test]
    fn permutation_swaps_kron_factors(
        (a, b) in (matrix(1..4, 1..4), matrix(1..4, 1..4))
    ) {
        // Π_(m,p) (A ⊗ B) Π_(q,n) = B ⊗ A for A m×n, B p×q
        let (m, n) = a.shape();
        let (p, q) = b.shape();
        let lhs = permute_cols(&permute_rows(p, m, &kron(&a, &b)), n, q);
        prop_assert_eq!(lhs, kron(&b, &a));
    }

    #[test]
    fn implicit_permutations_match_explicit(x in matrix(12..13, 1..4), y in matrix(1..4, 12..13)) {
        prop_assert_eq!(permute_rows(3, 4, &x), vec_permutation(3, 4) * &x);
        prop_assert_eq!(permute_cols(&y, 4, 3), &y * vec_permutation(4, 3));
    }

    #[test]
    fn pinv_penrose_conditions(a in matrix(1..6, 1..6)) {
        let g = pinv_default(&a).unwrap();
        prop_assert!(close(&(&a * &g * &a), &a, 1e-8));
        prop_assert!(close(&(&g * &a * &g), &g, 1e-8));
        let ag = &a * &g;
        let ga = &g * &a;
        prop_assert!(close(&ag, &ag.transpose(), 1e-8));
        prop_assert!(close(&ga, &ga.transpose(), 1e-8));
    }
}
