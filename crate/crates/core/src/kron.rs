//! Kronecker products, column-stacking `vec`, vec-permutation matrices and a
//! tolerance-based pseudoinverse.

use nalgebra::{DMatrix, DVector};

use crate::dense;
use crate::error::Result;

/// Column-stacking vectorization.
pub fn vec(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec`]: reshapes a vector of length `rows * cols` column by column.
pub fn unvec(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    assert_eq!(v.len(), rows * cols, "unvec length mismatch");
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}

/// `A ⊗ B = [a_ij B]`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, n) = a.shape();
    let (s, t) = b.shape();
    let mut out = DMatrix::zeros(m * s, n * t);
    for j in 0..n {
        for i in 0..m {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            let mut block = out.view_mut((i * s, j * t), (s, t));
            block.zip_apply(b, |o, bv| *o = aij * bv);
        }
    }
    out
}

/// Index map of the vec-permutation `Π_(m,n)`: entry `k` of `vec(A)` lands at
/// position `perm[k]` of `vec(Aᵀ)` for an `m × n` matrix `A`.
fn vec_permutation_targets(m: usize, n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |j| (0..m).map(move |i| (i + j * m, j + i * n)))
}

/// The `mn × mn` vec-permutation matrix with `Π_(m,n) vec(A) = vec(Aᵀ)` for
/// every `m × n` matrix `A`.
pub fn vec_permutation(m: usize, n: usize) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(m * n, m * n);
    for (src, dst) in vec_permutation_targets(m, n) {
        p[(dst, src)] = 1.0;
    }
    p
}

/// `Π_(m,n) · X` computed as a row permutation, without forming `Π`.
pub fn permute_rows(m: usize, n: usize, x: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(x.nrows(), m * n, "permute_rows dimension mismatch");
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    for (src, dst) in vec_permutation_targets(m, n) {
        out.row_mut(dst).copy_from(&x.row(src));
    }
    out
}

/// `X · Π_(m,n)` computed as a column permutation.
pub fn permute_cols(x: &DMatrix<f64>, m: usize, n: usize) -> DMatrix<f64> {
    assert_eq!(x.ncols(), m * n, "permute_cols dimension mismatch");
    let mut out = DMatrix::zeros(x.nrows(), x.ncols());
    // (XΠ)[:, src] = X[:, dst] because Π[dst, src] = 1
    for (src, dst) in vec_permutation_targets(m, n) {
        out.column_mut(src).copy_from(&x.column(dst));
    }
    out
}

/// Default relative pseudoinverse threshold: `max(rows, cols) · u`.
pub fn default_pinv_tol(m: &DMatrix<f64>) -> f64 {
    m.nrows().max(m.ncols()) as f64 * f64::EPSILON
}

/// Moore–Penrose pseudoinverse via SVD. Singular values at or below
/// `tol · σ_max` are treated as zero.
pub fn pinv(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let (rows, cols) = m.shape();
    let svd = dense::svd(m)?;
    let smax = svd.s.iter().cloned().fold(0.0, f64::max);
    let mut out = DMatrix::zeros(cols, rows);
    if smax == 0.0 {
        return Ok(out);
    }
    let cutoff = tol * smax;
    for (i, &s) in svd.s.iter().enumerate() {
        if s > cutoff {
            out += (svd.v.column(i) / s) * svd.u.column(i).transpose();
        }
    }
    Ok(out)
}

/// [`pinv`] with [`default_pinv_tol`].
pub fn pinv_default(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    pinv(m, default_pinv_tol(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn vec_stacks_columns() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(vec(&m).as_slice(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(vec(&DMatrix::zeros(2, 3)), DVector::zeros(6));
    }

    #[test]
    fn unvec_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = rand_mat(&mut rng, 3, 2);
        assert_eq!(unvec(&vec(&m), 3, 2), m);
    }

    #[test]
    fn kron_identity_scalar() {
        let k = kron(&DMatrix::identity(2, 2), &DMatrix::from_element(1, 1, 5.0));
        assert_eq!(k, dense::diag(&[5.0, 5.0]));
    }

    #[test]
    fn kron_vec_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_mat(&mut rng, 3, 3);
        let x = rand_mat(&mut rng, 3, 2);
        let b = rand_mat(&mut rng, 2, 4);
        let lhs = vec(&(&a * &x * &b));
        let rhs = kron(&b.transpose(), &a) * vec(&x);
        assert!((lhs - rhs).amax() < 1e-13);
    }

    #[test]
    fn kron_spectral_norm_multiplies() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_mat(&mut rng, 4, 3);
        let b = rand_mat(&mut rng, 2, 5);
        let lhs = dense::spectral_norm(&kron(&a, &b)).unwrap();
        let rhs = dense::spectral_norm(&a).unwrap() * dense::spectral_norm(&b).unwrap();
        assert!((lhs - rhs).abs() <= 1e-13 * rhs);
    }

    #[test]
    fn vec_permutation_basics() {
        assert_eq!(vec_permutation(1, 4), DMatrix::identity(4, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_mat(&mut rng, 2, 3);
        assert_eq!(vec_permutation(2, 3) * vec(&a), vec(&a.transpose()));
        let p = vec_permutation(3, 4);
        assert_eq!(p.transpose() * &p, DMatrix::identity(12, 12));
    }

    #[test]
    fn row_and_column_permutations_match_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_mat(&mut rng, 6, 6);
        let p = vec_permutation(2, 3);
        assert_eq!(permute_rows(2, 3, &x), &p * &x);
        assert_eq!(permute_cols(&x, 2, 3), &x * &p);
    }

    #[test]
    fn pinv_small_cases() {
        assert_eq!(pinv_default(&DMatrix::identity(3, 3)).unwrap(), DMatrix::identity(3, 3));
        let d = pinv_default(&dense::diag(&[2.0, 0.0])).unwrap();
        assert_eq!(d, dense::diag(&[0.5, 0.0]));
        assert_eq!(pinv_default(&DMatrix::zeros(2, 3)).unwrap(), DMatrix::zeros(3, 2));
    }

    #[test]
    fn pinv_full_row_rank_right_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = rand_mat(&mut rng, 3, 5);
        let prod = &m * pinv_default(&m).unwrap();
        assert!((prod - DMatrix::identity(3, 3)).amax() < 1e-12);
    }
}
