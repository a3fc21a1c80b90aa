//! Validation, factorization and solution of the multidimensional total least
//! squares problem with linear equality constraints
//!
//! ```text
//!     min ‖[E F]‖_F  subject to  (A + E) X = B + F,  C X = D
//! ```
//!
//! with `A: q × n`, `B: q × d`, `C: p × n` of full row rank and `D: p × d`.
//!
//! The pipeline is: full QR of `[C D]ᵀ` to get an orthonormal basis `Q̃₂` of
//! the null space of `C̃ = [C D]`, skinny SVD of `ÃQ̃₂` with `Ã = [A B]`, rank
//! selection under the gap and trailing-block gates, and finally
//! `X_t = -V̄₁₂ V̄₂₂†` with `V̄ = Q̃₂ Ṽ`.

use nalgebra::{DMatrix, DVector};

use crate::dense::{self, hstack, vstack};
use crate::error::{Gate, Result, TlseError};
use crate::kron;

/// Problem dimensions `(p, q, n, d)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Dims {
    pub p: usize,
    pub q: usize,
    pub n: usize,
    pub d: usize,
}

impl Dims {
    /// Column count `n + d` of the augmented matrices.
    pub fn cols(&self) -> usize {
        self.n + self.d
    }

    /// Row count `p + q` of the stacked data `[L H]`.
    pub fn rows(&self) -> usize {
        self.p + self.q
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(p={}, q={}, n={}, d={})", self.p, self.q, self.n, self.d)
    }
}

/// The four input blocks of a TLSE instance.
#[derive(Debug, Clone, PartialEq)]
pub struct TlseProblem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl TlseProblem {
    /// Builds a problem after checking that the block shapes conform.
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        if a.nrows() != b.nrows() {
            return Err(TlseError::DimensionMismatch(format!(
                "A has {} rows but B has {}",
                a.nrows(),
                b.nrows()
            )));
        }
        if c.nrows() != d.nrows() {
            return Err(TlseError::DimensionMismatch(format!(
                "C has {} rows but D has {}",
                c.nrows(),
                d.nrows()
            )));
        }
        if a.ncols() != c.ncols() {
            return Err(TlseError::DimensionMismatch(format!(
                "A has {} columns but C has {}",
                a.ncols(),
                c.ncols()
            )));
        }
        if b.ncols() != d.ncols() {
            return Err(TlseError::DimensionMismatch(format!(
                "B has {} columns but D has {}",
                b.ncols(),
                d.ncols()
            )));
        }
        Ok(TlseProblem { a, b, c, d })
    }

    /// Unconstrained problem (`p = 0`).
    pub fn unconstrained(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        let (n, d) = (a.ncols(), b.ncols());
        Self::new(a, b, DMatrix::zeros(0, n), DMatrix::zeros(0, d))
    }

    pub fn dims(&self) -> Dims {
        Dims { p: self.c.nrows(), q: self.a.nrows(), n: self.a.ncols(), d: self.b.ncols() }
    }

    /// `Ã = [A B]`.
    pub fn a_tilde(&self) -> DMatrix<f64> {
        hstack(&self.a, &self.b)
    }

    /// `C̃ = [C D]`.
    pub fn c_tilde(&self) -> DMatrix<f64> {
        hstack(&self.c, &self.d)
    }

    /// `L = [C; A]`, constraint rows first.
    pub fn l(&self) -> DMatrix<f64> {
        vstack(&self.c, &self.a)
    }

    /// `H = [D; B]`.
    pub fn h(&self) -> DMatrix<f64> {
        vstack(&self.d, &self.b)
    }

    /// `[L H]`, the `(p+q) × (n+d)` stacked data.
    pub fn stacked(&self) -> DMatrix<f64> {
        vstack(&self.c_tilde(), &self.a_tilde())
    }

    /// Inverse of [`TlseProblem::stacked`].
    pub fn from_stacked(dims: Dims, data: &DMatrix<f64>) -> Result<Self> {
        if data.shape() != (dims.rows(), dims.cols()) {
            return Err(TlseError::DimensionMismatch(format!(
                "stacked data is {}x{}, expected {}x{}",
                data.nrows(),
                data.ncols(),
                dims.rows(),
                dims.cols()
            )));
        }
        let Dims { p, q, n, d } = dims;
        Self::new(
            data.view((p, 0), (q, n)).into_owned(),
            data.view((p, n), (q, d)).into_owned(),
            data.view((0, 0), (p, n)).into_owned(),
            data.view((0, n), (p, d)).into_owned(),
        )
    }

    /// Every block multiplied by `alpha`; the solution is unchanged.
    pub fn scaled(&self, alpha: f64) -> Self {
        TlseProblem {
            a: &self.a * alpha,
            b: &self.b * alpha,
            c: &self.c * alpha,
            d: &self.d * alpha,
        }
    }
}

/// Outcome of [`validate`].
#[derive(Debug)]
pub struct Diagnostics {
    pub dims: Dims,
    pub sigma_min_c: f64,
    pub sigma_max_c: f64,
    pub issues: Vec<TlseError>,
}

impl Diagnostics {
    pub fn passed(&self) -> bool {
        self.issues.is_empty()
    }

    /// Converts into an error carrying the first issue, if any.
    pub fn check(mut self) -> Result<Diagnostics> {
        if self.issues.is_empty() {
            Ok(self)
        } else {
            Err(self.issues.remove(0))
        }
    }
}

/// Default relative threshold on `σ_min(C)/σ_max(C)` for the full row rank test.
pub const DEFAULT_CONSTRAINT_RANK_TOL: f64 = 1e-12;

/// Checks the standing assumptions: finite entries, `p ≤ n`, `d ≥ 1`,
/// `q ≥ n + d - p` (the projected data `ÃQ̃₂` is overdetermined, so its
/// skinny SVD has a square `Σ̃`), and `σ_min(C) > tol · σ_max(C)`.
pub fn validate(problem: &TlseProblem, tol: f64) -> Diagnostics {
    let dims = problem.dims();
    let Dims { p, q, n, d } = dims;
    let mut issues = Vec::new();
    for (name, m) in [("A", &problem.a), ("B", &problem.b), ("C", &problem.c), ("D", &problem.d)] {
        if m.iter().any(|x| !x.is_finite()) {
            issues.push(TlseError::NonFinite(name));
        }
    }
    if d == 0 {
        issues.push(TlseError::InvalidParameter("d must be at least 1".into()));
    }
    if q + p < n + d {
        issues.push(TlseError::NotOverdetermined(format!(
            "q = {q} must be at least n + d - p = {}",
            n + d - p
        )));
    }
    if p > n {
        issues.push(TlseError::InvalidParameter(format!("p = {p} exceeds n = {n}")));
    }
    let (mut sigma_min_c, mut sigma_max_c) = (f64::INFINITY, 0.0);
    if p > 0 && issues.is_empty() {
        match dense::singular_values(&problem.c) {
            Ok(s) => {
                sigma_max_c = s[0];
                sigma_min_c = s[s.len() - 1];
                let threshold = tol * sigma_max_c;
                if s.len() < p || !(sigma_min_c > threshold) {
                    issues.push(TlseError::RankDeficientConstraint {
                        sigma_min: if s.len() < p { 0.0 } else { sigma_min_c },
                        threshold,
                    });
                }
            }
            Err(e) => issues.push(e),
        }
    }
    Diagnostics { dims, sigma_min_c, sigma_max_c, issues }
}

/// Which singular pair to negate in [`TlseDecomposition::flip_pair`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairKind {
    /// `(ũᵢ, ṽᵢ)` of `ÃQ̃₂`; the matching column of `V̄` flips with it.
    Projected,
    /// `(u_C,i, v_C,i)` of `C̃`.
    Constraint,
}

/// Factorizations behind a TLSE solution, plus the selected rank `k`.
#[derive(Debug, Clone)]
pub struct TlseDecomposition {
    pub dims: Dims,
    /// Full orthogonal `Q̃ = [Q̃₁ Q̃₂]` from the QR of `C̃ᵀ`.
    pub q_tilde: DMatrix<f64>,
    /// `Ũ`, `q × (n+d-p)`.
    pub u_tilde: DMatrix<f64>,
    /// `σ̃₁ ≥ … ≥ σ̃_{n+d-p}`.
    pub sigma_tilde: DVector<f64>,
    /// `Ṽ`, `(n+d-p) × (n+d-p)` orthogonal.
    pub v_tilde: DMatrix<f64>,
    /// Skinny SVD `C̃ = U_C S_C V_Cᵀ`.
    pub u_c: DMatrix<f64>,
    pub s_c: DVector<f64>,
    pub v_c: DMatrix<f64>,
    /// `V̄ = Q̃₂ Ṽ`.
    pub v_bar: DMatrix<f64>,
    /// Selected rank index; `t = p + k`.
    pub k: usize,
}

impl TlseDecomposition {
    pub fn t(&self) -> usize {
        self.dims.p + self.k
    }

    /// `n + d - t`, the width of `V̄₂`.
    pub fn r(&self) -> usize {
        self.dims.cols() - self.t()
    }

    pub fn with_rank(&self, k: usize) -> Self {
        let mut out = self.clone();
        out.k = k;
        out
    }

    pub fn q1(&self) -> DMatrix<f64> {
        self.q_tilde.columns(0, self.dims.p).into_owned()
    }

    pub fn q2(&self) -> DMatrix<f64> {
        let p = self.dims.p;
        self.q_tilde.columns(p, self.dims.cols() - p).into_owned()
    }

    pub fn u1(&self) -> DMatrix<f64> {
        self.u_tilde.columns(0, self.k).into_owned()
    }

    pub fn u2(&self) -> DMatrix<f64> {
        self.u_tilde.columns(self.k, self.r()).into_owned()
    }

    pub fn sigma1(&self) -> &[f64] {
        &self.sigma_tilde.as_slice()[..self.k]
    }

    pub fn sigma2(&self) -> &[f64] {
        &self.sigma_tilde.as_slice()[self.k..]
    }

    pub fn v_bar1(&self) -> DMatrix<f64> {
        self.v_bar.columns(0, self.k).into_owned()
    }

    pub fn v_bar2(&self) -> DMatrix<f64> {
        self.v_bar.columns(self.k, self.r()).into_owned()
    }

    pub fn v_bar11(&self) -> DMatrix<f64> {
        self.v_bar.view((0, 0), (self.dims.n, self.k)).into_owned()
    }

    pub fn v_bar21(&self) -> DMatrix<f64> {
        self.v_bar.view((self.dims.n, 0), (self.dims.d, self.k)).into_owned()
    }

    pub fn v_bar12(&self) -> DMatrix<f64> {
        self.v_bar.view((0, self.k), (self.dims.n, self.r())).into_owned()
    }

    pub fn v_bar22(&self) -> DMatrix<f64> {
        self.v_bar.view((self.dims.n, self.k), (self.dims.d, self.r())).into_owned()
    }

    /// `V̂₁ = [V_C V̄₁]`, `(n+d) × t`.
    pub fn v_hat1(&self) -> DMatrix<f64> {
        hstack(&self.v_c, &self.v_bar1())
    }

    pub fn v_hat11(&self) -> DMatrix<f64> {
        self.v_hat1().rows(0, self.dims.n).into_owned()
    }

    pub fn v_hat21(&self) -> DMatrix<f64> {
        self.v_hat1().rows(self.dims.n, self.dims.d).into_owned()
    }

    /// `C̃† = V_C S_C⁻¹ U_Cᵀ`.
    pub fn c_tilde_pinv(&self) -> DMatrix<f64> {
        let mut vs = self.v_c.clone();
        for (mut col, s) in vs.column_iter_mut().zip(self.s_c.iter()) {
            col /= *s;
        }
        vs * self.u_c.transpose()
    }

    /// Negates the `i`-th singular pair in place. Every derived quantity is
    /// invariant under this operation.
    pub fn flip_pair(&mut self, kind: PairKind, i: usize) {
        match kind {
            PairKind::Projected => {
                self.u_tilde.column_mut(i).neg_mut();
                self.v_tilde.column_mut(i).neg_mut();
                self.v_bar.column_mut(i).neg_mut();
            }
            PairKind::Constraint => {
                self.u_c.column_mut(i).neg_mut();
                self.v_c.column_mut(i).neg_mut();
            }
        }
    }
}

/// Factorizes with the null-space basis from the QR of `C̃ᵀ`.
pub fn factorize(problem: &TlseProblem, tol: f64) -> Result<TlseDecomposition> {
    factorize_impl(problem, tol, None)
}

/// Factorizes with the null-space basis `Q̃₂ W` for an orthogonal `W` of size
/// `n+d-p`. Solutions and condition numbers do not depend on `W`.
pub fn factorize_with_rotation(problem: &TlseProblem, tol: f64, rotation: &DMatrix<f64>) -> Result<TlseDecomposition> {
    factorize_impl(problem, tol, Some(rotation))
}

fn factorize_impl(problem: &TlseProblem, tol: f64, rotation: Option<&DMatrix<f64>>) -> Result<TlseDecomposition> {
    let dims = validate(problem, tol).check()?.dims;
    let p = dims.p;
    let c_tilde = problem.c_tilde();
    let (mut q_tilde, _) = dense::full_qr(&c_tilde.transpose());
    if let Some(w) = rotation {
        let m = dims.cols() - p;
        if w.shape() != (m, m) {
            return Err(TlseError::DimensionMismatch(format!("rotation must be {m}x{m}")));
        }
        let rotated = q_tilde.columns(p, m) * w;
        q_tilde.columns_mut(p, m).copy_from(&rotated);
    }
    let q2 = q_tilde.columns(p, dims.cols() - p).into_owned();
    let c_svd = dense::svd(&c_tilde)?;
    if c_svd.s.len() < p || (p > 0 && !(c_svd.s[p - 1] > tol * c_svd.s[0])) {
        return Err(TlseError::RankDeficientConstraint {
            sigma_min: if c_svd.s.len() < p { 0.0 } else { c_svd.s[p - 1] },
            threshold: if p > 0 { tol * c_svd.s[0] } else { 0.0 },
        });
    }
    let proj = problem.a_tilde() * &q2;
    let proj_svd = dense::svd(&proj)?;
    let v_bar = &q2 * &proj_svd.v;
    Ok(TlseDecomposition {
        dims,
        q_tilde,
        u_tilde: proj_svd.u,
        sigma_tilde: proj_svd.s,
        v_tilde: proj_svd.v,
        u_c: c_svd.u,
        s_c: c_svd.s,
        v_c: c_svd.v,
        v_bar,
        k: dims.n - p,
    })
}

/// Default relative gap threshold for `σ̃_k - σ̃_{k+1} > gap_tol · σ̃₁`.
pub const DEFAULT_GAP_TOL: f64 = 1e-8;
/// Default threshold for `σ_d(V̄₂₂)`.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

fn check_rank(decomp: &TlseDecomposition, k: usize, gap_tol: f64, rank_tol: f64) -> Result<()> {
    let s = &decomp.sigma_tilde;
    if k > 0 {
        let gap = s[k - 1] - s[k];
        let threshold = gap_tol * s[0];
        if !(gap > threshold) {
            return Err(TlseError::GateFailure {
                gate: Gate::SingularValueGap,
                k,
                detail: format!("σ̃_k - σ̃_(k+1) = {gap:.3e} <= {threshold:.3e}"),
            });
        }
    }
    let v22 = decomp.with_rank(k).v_bar22();
    let sv = dense::singular_values(&v22)?;
    let d = decomp.dims.d;
    let sigma_d = if sv.len() >= d { sv[d - 1] } else { 0.0 };
    if !(sigma_d > rank_tol) {
        return Err(TlseError::GateFailure {
            gate: Gate::TrailingBlockRank,
            k,
            detail: format!("σ_d(V̄22) = {sigma_d:.3e} <= {rank_tol:.3e}"),
        });
    }
    Ok(())
}

/// Chooses `k`. A requested `t` is checked against both gates; otherwise
/// `k = n - p` is tried first, then smaller values in decreasing order.
pub fn select_rank(decomp: &TlseDecomposition, requested_t: Option<usize>, gap_tol: f64, rank_tol: f64) -> Result<usize> {
    let Dims { p, n, .. } = decomp.dims;
    let max_k = n - p;
    if let Some(t) = requested_t {
        if t < p || t > n {
            return Err(TlseError::InvalidParameter(format!("requested t = {t} outside [p, n] = [{p}, {n}]")));
        }
        let k = t - p;
        check_rank(decomp, k, gap_tol, rank_tol)?;
        return Ok(k);
    }
    let mut last = None;
    for k in (0..=max_k).rev() {
        match check_rank(decomp, k, gap_tol, rank_tol) {
            Ok(()) => return Ok(k),
            Err(e) if e.gate().is_some() => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(TlseError::Unsolvable { max_k, last: Box::new(last.expect("at least one k was tried")) })
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub requested_t: Option<usize>,
    pub gap_tol: f64,
    pub rank_tol: f64,
    pub constraint_tol: f64,
    /// Relative cutoff for the pseudoinverse of `V̄₂₂`; `None` uses
    /// `max(r, d)·ε`.
    pub pinv_tol: Option<f64>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            requested_t: None,
            gap_tol: DEFAULT_GAP_TOL,
            rank_tol: DEFAULT_RANK_TOL,
            constraint_tol: DEFAULT_CONSTRAINT_RANK_TOL,
            pinv_tol: None,
        }
    }
}

impl SolveOptions {
    pub fn with_t(t: usize) -> Self {
        SolveOptions { requested_t: Some(t), ..Default::default() }
    }
}

/// Minimum-Frobenius-norm TLSE solution and the corrected consistent system.
#[derive(Debug, Clone)]
pub struct TlseSolution {
    pub x: DMatrix<f64>,
    /// `Â = Ũ₁ Σ̃₁ V̄₁₁ᵀ`.
    pub a_hat: DMatrix<f64>,
    /// `B̂ = Ũ₁ Σ̃₁ V̄₂₁ᵀ`.
    pub b_hat: DMatrix<f64>,
    /// Optimal correction `[Ê F̂] = -Ũ₂ Σ̃₂ V̄₂ᵀ` to `[A B]`.
    pub correction: DMatrix<f64>,
    pub constraint_residual: f64,
    pub consistency_residual: f64,
    pub correction_norm: f64,
    pub k: usize,
    pub t: usize,
}

/// Solves using the rank already stored in `decomp`.
pub fn solution_from_decomposition(problem: &TlseProblem, decomp: &TlseDecomposition) -> Result<TlseSolution> {
    solution_with_pinv_tol(problem, decomp, None)
}

pub fn solution_with_pinv_tol(problem: &TlseProblem, decomp: &TlseDecomposition, pinv_tol: Option<f64>) -> Result<TlseSolution> {
    let v22 = decomp.v_bar22();
    let v22_pinv = match pinv_tol {
        Some(tol) => kron::pinv(&v22, tol)?,
        None => kron::pinv_default(&v22)?,
    };
    let x = -decomp.v_bar12() * v22_pinv;

    let mut u1s1 = decomp.u1();
    for (mut col, s) in u1s1.column_iter_mut().zip(decomp.sigma1()) {
        col *= *s;
    }
    let a_hat = &u1s1 * decomp.v_bar11().transpose();
    let b_hat = &u1s1 * decomp.v_bar21().transpose();
    let mut u2s2 = decomp.u2();
    for (mut col, s) in u2s2.column_iter_mut().zip(decomp.sigma2()) {
        col *= *s;
    }
    let correction = -(u2s2 * decomp.v_bar2().transpose());

    let constraint_residual = (&problem.c * &x - &problem.d).norm();
    let consistency_residual = (&a_hat * &x - &b_hat).norm();
    let correction_norm = correction.norm();
    Ok(TlseSolution {
        x,
        a_hat,
        b_hat,
        correction,
        constraint_residual,
        consistency_residual,
        correction_norm,
        k: decomp.k,
        t: decomp.t(),
    })
}

/// Factorizes, selects the rank and solves.
pub fn solve_full(problem: &TlseProblem, opts: &SolveOptions) -> Result<(TlseDecomposition, TlseSolution)> {
    let decomp = factorize(problem, opts.constraint_tol)?;
    let k = select_rank(&decomp, opts.requested_t, opts.gap_tol, opts.rank_tol)?;
    let decomp = decomp.with_rank(k);
    let sol = solution_with_pinv_tol(problem, &decomp, opts.pinv_tol)?;
    Ok((decomp, sol))
}

pub fn solve(problem: &TlseProblem, opts: &SolveOptions) -> Result<TlseSolution> {
    solve_full(problem, opts).map(|(_, s)| s)
}

/// Quantities of the closed-form single right-hand-side solution
/// `x_n = x_C - 𝒦 Aᵀ r_C`.
#[derive(Debug, Clone)]
pub struct SingleDimAuxiliaries {
    /// `x_C = C† d`.
    pub x_c: DVector<f64>,
    /// `r_C = A x_C - b`.
    pub r_c: DVector<f64>,
    /// Orthonormal basis of the null space of `C`, `n × (n-p)`.
    pub q2: DMatrix<f64>,
    /// `σ̃_{n-p+1}` of `[AQ₂ β⁻¹r_C]`.
    pub sigma_last: f64,
    /// `𝒦 = Q₂ (Q₂ᵀAᵀAQ₂ - σ̃²_{n-p+1} I)⁻¹ Q₂ᵀ`.
    pub k_cal: DMatrix<f64>,
    pub x_n: DVector<f64>,
    /// `r = A x_n - b`.
    pub r: DVector<f64>,
    /// `ρ = √(1 + ‖x_n‖²)`.
    pub rho: f64,
    /// `β = √(1 + ‖x_C‖²)`.
    pub beta: f64,
}

/// Closed-form solution for `d = 1`, independent of the SVD of `ÃQ̃₂`.
pub fn solve_single_dim(problem: &TlseProblem) -> Result<SingleDimAuxiliaries> {
    let Dims { p, n, d, .. } = problem.dims();
    if d != 1 {
        return Err(TlseError::InvalidParameter(format!("single-dimensional path needs d = 1, got {d}")));
    }
    validate(problem, DEFAULT_CONSTRAINT_RANK_TOL).check()?;
    let b = problem.b.column(0).into_owned();
    let x_c: DVector<f64> = if p > 0 {
        kron::pinv_default(&problem.c)? * problem.d.column(0)
    } else {
        DVector::zeros(n)
    };
    let r_c = &problem.a * &x_c - &b;
    let beta = (1.0 + x_c.norm_squared()).sqrt();
    let (q, _) = dense::full_qr(&problem.c.transpose());
    let q2 = q.columns(p, n - p).into_owned();
    let aq2 = &problem.a * &q2;

    let c = &r_c / beta;
    let (sigma_last, k_cal, x_n) = if n > p {
        let inner = dense::svd(&aq2)?;
        let s_min = inner.s[n - p - 1];
        let g = inner.u.transpose() * &c;
        let mut c_perp = &c - &inner.u * &g;
        c_perp -= &inner.u * (inner.u.transpose() * &c_perp);
        // Shifted squares s_i² - σ̃² = (s_i² - s_min²) + δ, with δ = s_min² - σ̃²
        // taken from the secular equation of [AQ2 β⁻¹r_C] rather than from a
        // difference of two computed singular values.
        let offsets: Vec<f64> = inner.s.iter().map(|&s| (s - s_min) * (s + s_min)).collect();
        let delta = secular_shift(s_min * s_min, &offsets, g.as_slice(), c_perp.norm_squared());
        let sigma_last = (s_min * s_min - delta).max(0.0).sqrt();
        let scale: Vec<f64> = offsets.iter().map(|&o| 1.0 / (o + delta)).collect();
        if !(delta > 0.0) || scale.iter().any(|v| !v.is_finite())
            || !(s_min - sigma_last > DEFAULT_GAP_TOL * inner.s[0].max(c.norm()))
        {
            return Err(TlseError::Genericity(format!(
                "σ_(n-p)(AQ2) = {s_min:.6e} does not exceed σ̃_(n-p+1) = {sigma_last:.6e}"
            )));
        }
        let w = &q2 * &inner.v;
        let k_cal = &w * DMatrix::from_diagonal(&DVector::from_vec(scale.clone())) * w.transpose();
        // x_n - x_C = -𝒦 Aᵀ r_C, applied through the factors
        let coef = DVector::from_iterator(n - p, (0..n - p).map(|i| -beta * inner.s[i] * g[i] * scale[i]));
        (sigma_last, k_cal, &x_c + &w * coef)
    } else {
        (c.norm(), DMatrix::zeros(n, n), x_c.clone())
    };
    let r = &problem.a * &x_n - &b;
    let rho = (1.0 + x_n.norm_squared()).sqrt();
    Ok(SingleDimAuxiliaries { x_c, r_c, q2, sigma_last, k_cal, x_n, r, rho, beta })
}

/// Root `δ ∈ (0, s²]` of `(s² - δ)(1 + Σ gᵢ²/(oᵢ + δ)) = ‖c⊥‖²`, i.e. the gap
/// between `s²` (the smallest squared singular value of `AQ2`) and the smallest
/// eigenvalue of the bordered Gram matrix. All terms are positive, so the
/// root is found to nearly full relative precision by bisection in log scale.
fn secular_shift(s2: f64, offsets: &[f64], g: &[f64], perp2: f64) -> f64 {
    let h = |delta: f64| {
        let sum: f64 = offsets.iter().zip(g).map(|(o, gi)| gi * gi / (o + delta)).sum();
        (s2 - delta) * (1.0 + sum) - perp2
    };
    if !(h(s2) < 0.0) {
        return s2;
    }
    let (mut lo, mut hi) = (f64::MIN_POSITIVE, s2);
    if !(h(lo) > 0.0) {
        return 0.0;
    }
    for _ in 0..200 {
        let mid = if hi > 4.0 * lo { lo.sqrt() * hi.sqrt() } else { 0.5 * (lo + hi) };
        if mid <= lo || mid >= hi {
            break;
        }
        if h(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Minimum-norm solution of the weighted unconstrained problem with the
/// constraint rows scaled by `1/ε`, truncated at the same `t`.
pub fn wtls_solve(problem: &TlseProblem, epsilon: f64, t: usize, rank_tol: f64) -> Result<DMatrix<f64>> {
    if !(epsilon > 0.0) {
        return Err(TlseError::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
    }
    let Dims { n, d, .. } = problem.dims();
    let cols = n + d;
    if t > n {
        return Err(TlseError::InvalidParameter(format!("t = {t} exceeds n = {n}")));
    }
    let weighted = vstack(&(problem.c_tilde() / epsilon), &problem.a_tilde());
    if weighted.nrows() < cols {
        return Err(TlseError::NotOverdetermined("stacked system has fewer rows than n + d".into()));
    }
    let svd = dense::svd(&weighted)?;
    let v12 = svd.v.view((0, t), (n, cols - t)).into_owned();
    let v22 = svd.v.view((n, t), (d, cols - t)).into_owned();
    let sv = dense::singular_values(&v22)?;
    let sigma_d = if sv.len() >= d { sv[d - 1] } else { 0.0 };
    if !(sigma_d > rank_tol) {
        return Err(TlseError::GateFailure {
            gate: Gate::TrailingBlockRank,
            k: t,
            detail: format!("weighted V22 has σ_d = {sigma_d:.3e} at ε = {epsilon:e}"),
        });
    }
    Ok(-v12 * kron::pinv_default(&v22)?)
}
