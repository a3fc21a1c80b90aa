//! Seeded problem generators: iid uniform data, constrained piecewise-cubic
//! fitting, and instances with a prescribed constraint conditioning and
//! singular-value gap.
//!
//! All randomness comes from `ChaCha8Rng::seed_from_u64(seed)`; trial `i` of
//! a study draws from stream `i` of the same seed (see [`trial_rng`]), so
//! trials are reproducible independently of evaluation order.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dense;
use crate::error::{Result, TlseError};
use crate::tlse::TlseProblem;

/// Generator for trial `trial` of a study seeded with `seed`.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

pub fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>())
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Haar-distributed orthogonal matrix: QR of a standard normal matrix with
/// the signs of `diag(R)` folded into `Q`.
pub fn random_orthogonal(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let (mut q, r) = dense::full_qr(&normal_matrix(rng, n, n));
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn random_unit(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    let v: DVector<f64> = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
    let norm = v.norm();
    v / norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum GeneratorSpec {
    Uniform { p: usize, q: usize, n: usize, d: usize },
    PiecewisePoly { m: usize, n: usize, a: f64, d: usize, noise: f64 },
    Controlled { kappa_c: f64, delta: f64 },
}

impl GeneratorSpec {
    pub fn generate(&self, seed: u64) -> Result<TlseProblem> {
        self.generate_with(&mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn generate_with(&self, rng: &mut ChaCha8Rng) -> Result<TlseProblem> {
        match *self {
            GeneratorSpec::Uniform { p, q, n, d } => uniform_with(p, q, n, d, rng),
            GeneratorSpec::PiecewisePoly { m, n, a, d, noise } => piecewise_with(m, n, a, d, noise, rng).map(|(pb, _)| pb),
            GeneratorSpec::Controlled { kappa_c, delta } => controlled_with(kappa_c, delta, rng),
        }
    }
}

/// Every entry of `[C D]` and `[A B]` iid uniform on `(0, 1)`.
pub fn gen_uniform(p: usize, q: usize, n: usize, d: usize, seed: u64) -> Result<TlseProblem> {
    uniform_with(p, q, n, d, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn uniform_with(p: usize, q: usize, n: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<TlseProblem> {
    if p > n || d == 0 || q + p < n + d {
        return Err(TlseError::InvalidParameter(format!(
            "uniform generator needs p <= n, d >= 1 and q >= n + d - p; got (p,q,n,d) = ({p},{q},{n},{d})"
        )));
    }
    let c = uniform_matrix(rng, p, n);
    let dd = uniform_matrix(rng, p, d);
    let a = uniform_matrix(rng, q, n);
    let b = uniform_matrix(rng, q, d);
    TlseProblem::new(a, b, c, dd)
}

/// Rows of the two-piece cubic design at abscissa `s`.
fn cubic_row(s: f64) -> [f64; 4] {
    [1.0, s, s * s, s * s * s]
}

/// Piecewise-cubic fit with `C¹` continuity at `a`.
///
/// `m + n_right` abscissae are drawn uniformly on `[0, 1]` and sorted; those
/// `≤ a` use the left cubic. Observations come from a random `C¹` piecewise
/// cubic; with `noise > 0` each observation gets independent uniform noise of
/// that amplitude, which makes the `d` columns differ. Returns the problem and
/// the generating coefficients (`8 × 1`).
pub fn gen_piecewise_poly(m: usize, n_right: usize, a: f64, seed: u64, d: usize, noise: f64) -> Result<(TlseProblem, DVector<f64>)> {
    piecewise_with(m, n_right, a, d, noise, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn piecewise_with(m: usize, n_right: usize, a: f64, d: usize, noise: f64, rng: &mut ChaCha8Rng) -> Result<(TlseProblem, DVector<f64>)> {
    if !(a > 0.0 && a < 1.0) {
        return Err(TlseError::InvalidParameter(format!("breakpoint a = {a} must lie in (0, 1)")));
    }
    if m < 4 || n_right < 4 || d == 0 || !(noise >= 0.0) {
        return Err(TlseError::InvalidParameter("piecewise generator needs M, N >= 4, d >= 1 and noise >= 0".into()));
    }
    let total = m + n_right;
    // redraw until both pieces carry at least four sites
    let sites = loop {
        let mut s: Vec<f64> = (0..total).map(|_| rng.random::<f64>()).collect();
        s.sort_by(f64::total_cmp);
        let left = s.iter().filter(|&&v| v <= a).count();
        if left >= 4 && total - left >= 4 {
            break s;
        }
    };

    let mut x = DVector::zeros(8);
    for i in [0, 1, 2, 3, 6, 7] {
        x[i] = StandardNormal.sample(rng);
    }
    let f1 = x[0] + x[1] * a + x[2] * a * a + x[3] * a * a * a;
    let df1 = x[1] + 2.0 * x[2] * a + 3.0 * x[3] * a * a;
    x[5] = df1 - 2.0 * x[6] * a - 3.0 * x[7] * a * a;
    x[4] = f1 - x[5] * a - x[6] * a * a - x[7] * a * a * a;

    let mut amat = DMatrix::zeros(total, 8);
    for (i, &s) in sites.iter().enumerate() {
        let off = if s <= a { 0 } else { 4 };
        for (j, v) in cubic_row(s).into_iter().enumerate() {
            amat[(i, off + j)] = v;
        }
    }
    let y = &amat * &x;
    let b = DMatrix::from_fn(total, d, |i, _| y[i] + if noise > 0.0 { noise * (2.0 * rng.random::<f64>() - 1.0) } else { 0.0 });
    let c = DMatrix::from_row_slice(
        2,
        8,
        &[
            1.0, a, a * a, a * a * a, -1.0, -a, -a * a, -a * a * a, //
            0.0, 1.0, 2.0 * a, 3.0 * a * a, 0.0, -1.0, -2.0 * a, -3.0 * a * a,
        ],
    );
    Ok((TlseProblem::new(amat, b, c, DMatrix::zeros(2, d))?, x))
}

/// Singular values placed in `Σ̂` for a gap parameter `delta`.
pub fn controlled_spectrum(delta: f64) -> Vec<f64> {
    let mut s = vec![10.0, 8.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0 - delta / 2.0, 1.0 - delta, 1.0 - 2.0 * delta];
    s.extend((6..=10).map(|j| 1.0 / j as f64));
    s
}

/// Instance with `p = d = 5`, `n = 10`, `q = 20` and `t = 8` in mind:
/// `C̃ = U₀ diag(1, 0.5, 0.1, 0.1, 1/κ_C) Q̃₁ᵀ` and
/// `Ã = (I - 2yyᵀ)[Σ̂; 0](I - 2zzᵀ) Q̃ᵀ`.
pub fn gen_controlled(kappa_c: f64, delta: f64, seed: u64) -> Result<TlseProblem> {
    controlled_with(kappa_c, delta, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub const CONTROLLED_T: usize = 8;

pub fn controlled_with(kappa_c: f64, delta: f64, rng: &mut ChaCha8Rng) -> Result<TlseProblem> {
    if !(kappa_c >= 1.0) {
        return Err(TlseError::InvalidParameter(format!("kappa_C = {kappa_c} must be at least 1")));
    }
    // 1 - 2δ must stay above the 1/6 tail of Σ̂
    if !(delta > 0.0 && delta < 5.0 / 12.0) {
        return Err(TlseError::InvalidParameter(format!("delta = {delta} must lie in (0, 5/12)")));
    }
    let (p, d, n, q) = (5, 5, 10, 20);
    let cols = n + d;
    let q_tilde = random_orthogonal(rng, cols);
    let u0 = random_orthogonal(rng, p);
    let y = random_unit(rng, q);
    let z = random_unit(rng, cols);

    let c_tilde = u0 * dense::diag(&[1.0, 0.5, 0.1, 0.1, 1.0 / kappa_c]) * q_tilde.columns(0, p).transpose();
    let mut sigma_block = DMatrix::zeros(q, cols);
    for (i, s) in controlled_spectrum(delta).into_iter().enumerate() {
        sigma_block[(i, i)] = s;
    }
    let hy = DMatrix::identity(q, q) - &y * y.transpose() * 2.0;
    let hz = DMatrix::identity(cols, cols) - &z * z.transpose() * 2.0;
    let a_tilde = hy * sigma_block * hz * q_tilde.transpose();
    TlseProblem::new(
        a_tilde.columns(0, n).into_owned(),
        a_tilde.columns(n, d).into_owned(),
        c_tilde.columns(0, n).into_owned(),
        c_tilde.columns(n, d).into_owned(),
    )
}
