//! Thin wrappers over nalgebra factorizations.
//!
//! All matrices in this crate are `nalgebra::DMatrix<f64>`, which stores
//! entries column-major. `vec` is column stacking, so it coincides with the
//! storage order.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, TlseError};

/// Skinny SVD `M = U diag(s) Vᵀ` with singular values in nonincreasing order.
///
/// For an `m × n` input, `u` is `m × min(m, n)` and `v` is `n × min(m, n)`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
}

pub fn svd(m: &DMatrix<f64>) -> Result<Svd> {
    let (rows, cols) = m.shape();
    let r = rows.min(cols);
    if r == 0 {
        return Ok(Svd {
            u: DMatrix::zeros(rows, 0),
            s: DVector::zeros(0),
            v: DMatrix::zeros(cols, 0),
        });
    }
    if m.iter().any(|x| !x.is_finite()) {
        return Err(TlseError::NonFinite("SVD input"));
    }
    let fm = faer::Mat::<f64>::from_fn(rows, cols, |i, j| m[(i, j)]);
    let dec = fm
        .thin_svd()
        .map_err(|e| TlseError::Numerical(format!("SVD of {rows}x{cols} matrix did not converge: {e:?}")))?;
    let (u, s, v) = (dec.U(), dec.S(), dec.V());
    let out = Svd {
        u: DMatrix::from_fn(rows, r, |i, j| u[(i, j)]),
        s: DVector::from_fn(r, |i, _| s[i]),
        v: DMatrix::from_fn(cols, r, |i, j| v[(i, j)]),
    };
    // cheap guard against a silently wrong factorization
    let limit = 1e3 * f64::EPSILON * (rows.max(cols) as f64) * max_abs(m);
    if !(reconstruction_error(m, &out) <= limit) {
        return Err(TlseError::Numerical(format!("SVD of {rows}x{cols} matrix failed its reconstruction check")));
    }
    Ok(out)
}

fn reconstruction_error(m: &DMatrix<f64>, s: &Svd) -> f64 {
    let mut us = s.u.clone();
    for (mut col, sv) in us.column_iter_mut().zip(s.s.iter()) {
        col *= *sv;
    }
    max_abs(&(m - us * s.v.transpose()))
}

/// Singular values in nonincreasing order, from the checked [`svd`].
pub fn singular_values(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    Ok(svd(m)?.s)
}

/// Largest singular value; zero for empty matrices.
pub fn spectral_norm(m: &DMatrix<f64>) -> Result<f64> {
    Ok(singular_values(m)?.iter().cloned().fold(0.0, f64::max))
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()))
}

/// Householder QR with the full square orthogonal factor.
///
/// Returns `(Q, R)` with `Q` of size `m × m` and `R` of size `m × n`, upper
/// trapezoidal. Columns `n..m` of `Q` span the orthogonal complement of the
/// range of `M` whenever `M` has full column rank.
pub fn full_qr(m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (rows, cols) = m.shape();
    let mut r = m.clone();
    let mut q = DMatrix::<f64>::identity(rows, rows);
    for j in 0..cols.min(rows) {
        let norm: f64 = (j..rows).map(|i| r[(i, j)] * r[(i, j)]).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let alpha = if r[(j, j)] > 0.0 { -norm } else { norm };
        let mut v = DVector::<f64>::zeros(rows);
        for i in j..rows {
            v[i] = r[(i, j)];
        }
        v[j] -= alpha;
        let vnorm2 = v.norm_squared();
        if vnorm2 == 0.0 {
            continue;
        }
        // R <- (I - 2vvᵀ/vᵀv) R
        for c in j..cols {
            let dot: f64 = (j..rows).map(|i| v[i] * r[(i, c)]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in j..rows {
                r[(i, c)] -= f * v[i];
            }
        }
        // Q <- Q (I - 2vvᵀ/vᵀv)
        for row in 0..rows {
            let dot: f64 = (j..rows).map(|i| q[(row, i)] * v[i]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in j..rows {
                q[(row, i)] -= f * v[i];
            }
        }
        for i in (j + 1)..rows {
            r[(i, j)] = 0.0;
        }
    }
    (q, r)
}

/// Inverse of a small symmetric positive definite matrix.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    nalgebra::Cholesky::new(m.clone())
        .map(|c| c.inverse())
        .ok_or_else(|| TlseError::Numerical("Gram matrix is not positive definite".into()))
}

/// Entrywise absolute value.
pub fn abs(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(f64::abs)
}

/// Vertical concatenation `[top; bottom]`.
pub fn vstack(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(top.ncols(), bottom.ncols(), "vstack column mismatch");
    let mut out = DMatrix::zeros(top.nrows() + bottom.nrows(), top.ncols());
    out.view_mut((0, 0), top.shape()).copy_from(top);
    out.view_mut((top.nrows(), 0), bottom.shape()).copy_from(bottom);
    out
}

/// Horizontal concatenation `[left right]`.
pub fn hstack(left: &DMatrix<f64>, right: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(left.nrows(), right.nrows(), "hstack row mismatch");
    let mut out = DMatrix::zeros(left.nrows(), left.ncols() + right.ncols());
    out.view_mut((0, 0), left.shape()).copy_from(left);
    out.view_mut((0, left.ncols()), right.shape()).copy_from(right);
    out
}

pub fn block_diag(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols() + b.ncols());
    out.view_mut((0, 0), a.shape()).copy_from(a);
    out.view_mut(a.shape(), b.shape()).copy_from(b);
    out
}

pub fn diag(values: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(values))
}
