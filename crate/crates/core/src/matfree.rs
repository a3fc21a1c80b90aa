//! Kronecker-free application of the reduced derivative `H̆ = (H₁+H₂)GZ̄`
//! and of the full derivative `K`, plus power iteration on `H̆ᵀH̆`.
//!
//! `H̆` acts on `f = [vec(F₁); vec(F₂)]` with `F₁: (p+q) × t` and
//! `F₂: r × t`:
//!
//! ```text
//!   S = Σ̃₂(QŨ₂)ᵀF₁ diag(0_p, I_k) + F₂ MᵀS₁
//!   T = S ./ denom
//!   H̆f = vec((V̄₁₂ + XV̄₂₂) T V̂₂₁ᵀ(V̄₂₂V̄₂₂ᵀ)⁻¹ + (V̂₁₁ + XV̂₂₁) Tᵀ V̄₂₂†)
//! ```
//!
//! `V̂₁₁ + XV̂₂₁` equals `V̂₁₁†ᵀ`, so no pseudoinverse of `V̂₁₁` is needed here.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::conditioning::ConditionFactors;
use crate::kron::{unvec, vec};

/// A real linear map with an exact adjoint.
pub trait LinearOperator {
    fn domain_dim(&self) -> usize;
    fn codomain_dim(&self) -> usize;
    fn apply(&self, x: &DVector<f64>) -> DVector<f64>;
    fn apply_adjoint(&self, y: &DVector<f64>) -> DVector<f64>;
}

/// Shared tail of both operators: `S ↦ vec(H₁ D⁻¹ vec S + H₂ D⁻¹ vec S)`.
struct Tail {
    denom: DMatrix<f64>,
    v12f: DMatrix<f64>,
    /// `V̂₂₁ᵀ(V̄₂₂V̄₂₂ᵀ)⁻¹`, `t × d`.
    h1_right: DMatrix<f64>,
    /// `V̂₁₁ + XV̂₂₁`, `n × t`.
    v_hat11_pinv_t: DMatrix<f64>,
    v22_pinv: DMatrix<f64>,
}

impl Tail {
    fn new(f: &ConditionFactors) -> Self {
        Tail {
            denom: f.denom.clone(),
            v12f: f.v12f.clone(),
            h1_right: f.v_hat21.transpose() * &f.gram_inv,
            v_hat11_pinv_t: &f.v_hat11 + &f.x * &f.v_hat21,
            v22_pinv: f.v22_pinv.clone(),
        }
    }

    fn forward(&self, s: &DMatrix<f64>) -> DVector<f64> {
        let t = s.component_div(&self.denom);
        let g = &self.v12f * &t * &self.h1_right + &self.v_hat11_pinv_t * t.transpose() * &self.v22_pinv;
        vec(&g)
    }

    /// Returns `D⁻¹`-scaled `S_adj` for a codomain vector.
    fn backward(&self, g: &DVector<f64>) -> DMatrix<f64> {
        let gm = unvec(g, self.v12f.nrows(), self.h1_right.ncols());
        let t = self.v12f.transpose() * &gm * self.h1_right.transpose()
            + &self.v22_pinv * gm.transpose() * &self.v_hat11_pinv_t;
        t.component_div(&self.denom)
    }
}

/// Matrix-free `H̆`.
pub struct BreveOperator {
    tail: Tail,
    p: usize,
    rows: usize,
    t: usize,
    r: usize,
    /// `QŨ₂Σ̃₂`.
    qu2s2: DMatrix<f64>,
    /// `MᵀS₁`.
    right: DMatrix<f64>,
}

impl BreveOperator {
    pub fn new(f: &ConditionFactors) -> Self {
        BreveOperator {
            tail: Tail::new(f),
            p: f.dims.p,
            rows: f.dims.rows(),
            t: f.t,
            r: f.r,
            qu2s2: f.qu2_scaled(),
            right: f.reduced_right(),
        }
    }

    fn zero_leading(&self, m: &mut DMatrix<f64>) {
        m.columns_mut(0, self.p).fill(0.0);
    }
}

impl LinearOperator for BreveOperator {
    fn domain_dim(&self) -> usize {
        self.rows * self.t + self.r * self.t
    }

    fn codomain_dim(&self) -> usize {
        self.tail.v12f.nrows() * self.tail.h1_right.ncols()
    }

    fn apply(&self, f: &DVector<f64>) -> DVector<f64> {
        assert_eq!(f.len(), self.domain_dim(), "H̆ operand has wrong length");
        let split = self.rows * self.t;
        let mut f1 = DMatrix::from_column_slice(self.rows, self.t, &f.as_slice()[..split]);
        let f2 = DMatrix::from_column_slice(self.r, self.t, &f.as_slice()[split..]);
        self.zero_leading(&mut f1);
        let s = self.qu2s2.transpose() * f1 + f2 * &self.right;
        self.tail.forward(&s)
    }

    fn apply_adjoint(&self, g: &DVector<f64>) -> DVector<f64> {
        assert_eq!(g.len(), self.codomain_dim(), "H̆ᵀ operand has wrong length");
        let s = self.tail.backward(g);
        let mut f1 = &self.qu2s2 * &s;
        self.zero_leading(&mut f1);
        let f2 = s * self.right.transpose();
        let mut out = DVector::zeros(self.domain_dim());
        let split = self.rows * self.t;
        out.rows_mut(0, split).copy_from_slice(f1.as_slice());
        out.rows_mut(split, f2.len()).copy_from_slice(f2.as_slice());
        out
    }
}

/// Matrix-free derivative `K: vec([ΔL ΔH]) ↦ vec(ΔX_t)`.
pub struct FrechetOperator {
    tail: Tail,
    rows: usize,
    cols: usize,
    qu2s2: DMatrix<f64>,
    v_bar1_padded: DMatrix<f64>,
    v_bar2: DMatrix<f64>,
    /// `[PU_C S_C  QŨ₁Σ̃₁]`.
    pu_qu1_scaled: DMatrix<f64>,
}

impl FrechetOperator {
    pub fn new(f: &ConditionFactors) -> Self {
        FrechetOperator {
            tail: Tail::new(f),
            rows: f.dims.rows(),
            cols: f.dims.cols(),
            qu2s2: f.qu2_scaled(),
            v_bar1_padded: f.v_bar1_padded.clone(),
            v_bar2: f.v_bar2.clone(),
            pu_qu1_scaled: f.pu_qu1_scaled(),
        }
    }

    /// `ΔX_t ≈ unvec(K vec(Δ))` for stacked `Δ = [ΔL ΔH]`.
    pub fn apply_matrix(&self, delta: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.tail.v12f.nrows();
        let d = self.tail.h1_right.ncols();
        unvec(&self.apply(&vec(delta)), n, d)
    }
}

impl LinearOperator for FrechetOperator {
    fn domain_dim(&self) -> usize {
        self.rows * self.cols
    }

    fn codomain_dim(&self) -> usize {
        self.tail.v12f.nrows() * self.tail.h1_right.ncols()
    }

    fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.domain_dim(), "K operand has wrong length");
        let delta = DMatrix::from_column_slice(self.rows, self.cols, x.as_slice());
        let s = self.qu2s2.transpose() * &delta * &self.v_bar1_padded
            + self.v_bar2.transpose() * delta.transpose() * &self.pu_qu1_scaled;
        self.tail.forward(&s)
    }

    fn apply_adjoint(&self, y: &DVector<f64>) -> DVector<f64> {
        assert_eq!(y.len(), self.codomain_dim(), "Kᵀ operand has wrong length");
        let s = self.tail.backward(y);
        let delta = &self.qu2s2 * &s * self.v_bar1_padded.transpose()
            + &self.pu_qu1_scaled * s.transpose() * self.v_bar2.transpose();
        vec(&delta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerOptions {
    /// Relative change of the estimate between iterations that ends a run.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for PowerOptions {
    fn default() -> Self {
        PowerOptions { tol: 1e-8, max_iter: 5000, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerResult {
    pub estimate: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `‖Av_i‖` per iteration of the run that produced the estimate.
    pub history: Vec<f64>,
}

fn normal_vector(len: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(len, |_, _| StandardNormal.sample(rng))
}

/// Power iteration on `AᵀA` from `start`; the estimate `‖Av‖` is
/// nondecreasing along the run.
pub fn power_iterate<O: LinearOperator + ?Sized>(op: &O, start: &DVector<f64>, tol: f64, max_iter: usize) -> PowerResult {
    let mut history = Vec::new();
    let norm = start.norm();
    if norm == 0.0 || op.domain_dim() == 0 {
        return PowerResult { estimate: 0.0, iterations: 0, converged: true, history };
    }
    let mut v = start / norm;
    let mut prev = f64::NEG_INFINITY;
    for it in 1..=max_iter {
        let w = op.apply(&v);
        let est = w.norm();
        history.push(est);
        if (est - prev).abs() <= tol * est || est == 0.0 {
            return PowerResult { estimate: est, iterations: it, converged: true, history };
        }
        prev = est;
        let z = op.apply_adjoint(&w);
        let zn = z.norm();
        if zn == 0.0 {
            return PowerResult { estimate: est, iterations: it, converged: true, history };
        }
        v = z / zn;
    }
    let estimate = history.iter().cloned().fold(0.0, f64::max);
    PowerResult { estimate, iterations: max_iter, converged: false, history }
}

/// Estimates `‖A‖₂`: one run from a seeded standard-normal start, then one
/// confirmation run from a fresh start; the larger estimate is kept. The
/// generator is ChaCha8 seeded with `opts.seed`.
pub fn power_norm<O: LinearOperator + ?Sized>(op: &O, opts: &PowerOptions) -> PowerResult {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let first = power_iterate(op, &normal_vector(op.domain_dim(), &mut rng), opts.tol, opts.max_iter);
    let second = power_iterate(op, &normal_vector(op.domain_dim(), &mut rng), opts.tol, opts.max_iter);
    let iterations = first.iterations + second.iterations;
    let mut best = if second.estimate > first.estimate { second } else { first };
    best.iterations = iterations;
    best
}

/// `κ_abs = ‖H̆‖₂` by power iteration.
pub fn power_kappa_abs(op: &BreveOperator, opts: &PowerOptions) -> PowerResult {
    power_norm(op, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{build_factors, frechet_matrix, kappa_abs, KappaMode};
    use crate::tlse::{solve_full, SolveOptions, TlseProblem};
    use rand::Rng;

    fn factors(seed: u64, p: usize, q: usize, n: usize, d: usize, t: Option<usize>) -> ConditionFactors {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = |r, c| DMatrix::from_fn(r, c, |_, _| rng.random::<f64>());
        let pb = TlseProblem::new(u(q, n), u(q, d), u(p, n), u(p, d)).unwrap();
        let (dec, sol) = solve_full(&pb, &SolveOptions { requested_t: t, ..Default::default() }).unwrap();
        build_factors(&pb, &dec, &sol).unwrap()
    }

    fn dense_of<O: LinearOperator>(op: &O) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(op.codomain_dim(), op.domain_dim());
        for j in 0..op.domain_dim() {
            let mut e = DVector::zeros(op.domain_dim());
            e[j] = 1.0;
            m.set_column(j, &op.apply(&e));
        }
        m
    }

    fn dense_adjoint_of<O: LinearOperator>(op: &O) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(op.domain_dim(), op.codomain_dim());
        for j in 0..op.codomain_dim() {
            let mut e = DVector::zeros(op.codomain_dim());
            e[j] = 1.0;
            m.set_column(j, &op.apply_adjoint(&e));
        }
        m
    }

    #[test]
    fn breve_columns_match_explicit() {
        for t in [Some(2), Some(3)] {
            let f = factors(1, 1, 6, 3, 2, t);
            let op = BreveOperator::new(&f);
            let explicit = f.breve().unwrap();
            let scale = explicit.amax();
            assert!((dense_of(&op) - &explicit).amax() <= 1e-12 * scale.max(1.0));
            assert!((dense_adjoint_of(&op) - explicit.transpose()).amax() <= 1e-12 * scale.max(1.0));
        }
    }

    #[test]
    fn frechet_operator_matches_explicit_k() {
        let f = factors(2, 2, 10, 5, 2, Some(4));
        let op = FrechetOperator::new(&f);
        let k = frechet_matrix(&f).unwrap();
        assert!((dense_of(&op) - &k).amax() <= 1e-12 * k.amax());
        assert!((dense_adjoint_of(&op) - k.transpose()).amax() <= 1e-12 * k.amax());
    }

    #[test]
    fn adjoint_identity_random_pairs() {
        let f = factors(3, 2, 12, 6, 2, Some(3));
        let op = BreveOperator::new(&f);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let x = normal_vector(op.domain_dim(), &mut rng);
            let y = normal_vector(op.codomain_dim(), &mut rng);
            let lhs = op.apply(&x).dot(&y);
            let rhs = x.dot(&op.apply_adjoint(&y));
            assert!((lhs - rhs).abs() <= 1e-12 * (op.apply(&x).norm() * y.norm()));
        }
    }

    #[test]
    fn zero_in_zero_out() {
        let f = factors(5, 1, 8, 4, 1, None);
        let op = BreveOperator::new(&f);
        assert_eq!(op.apply(&DVector::zeros(op.domain_dim())).amax(), 0.0);
        assert_eq!(op.apply_adjoint(&DVector::zeros(op.codomain_dim())).amax(), 0.0);
    }

    #[test]
    fn power_estimate_agrees_and_is_monotone() {
        for seed in 0..5 {
            let f = factors(10 + seed, 2, 10, 6, 2, None);
            let exact = kappa_abs(&f, KappaMode::Explicit).unwrap();
            let res = power_kappa_abs(&BreveOperator::new(&f), &PowerOptions { seed, ..Default::default() });
            assert!(res.converged);
            assert!((res.estimate - exact).abs() <= 1e-6 * exact);
            for w in res.history.windows(2) {
                assert!(w[1] >= w[0] * (1.0 - 1e-13));
            }
        }
    }

    struct Diag(Vec<f64>);

    impl LinearOperator for Diag {
        fn domain_dim(&self) -> usize {
            self.0.len()
        }
        fn codomain_dim(&self) -> usize {
            self.0.len()
        }
        fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
            DVector::from_iterator(x.len(), x.iter().zip(&self.0).map(|(a, b)| a * b))
        }
        fn apply_adjoint(&self, y: &DVector<f64>) -> DVector<f64> {
            self.apply(y)
        }
    }

    #[test]
    fn well_separated_top_value_converges_fast() {
        let op = Diag(vec![10.0, 1.0, 0.5, 0.1]);
        let res = power_iterate(&op, &DVector::from_element(4, 1.0), 1e-8, 5000);
        assert!(res.converged && res.iterations <= 100);
        assert!((res.estimate - 10.0).abs() < 1e-7);
    }

    #[test]
    fn orthogonal_start_is_rescued_by_restart() {
        let op = Diag(vec![10.0, 1.0, 0.5]);
        let stuck = power_iterate(&op, &DVector::from_column_slice(&[0.0, 1.0, 1.0]), 1e-8, 5000);
        assert!((stuck.estimate - 1.0).abs() < 1e-6);
        let res = power_norm(&op, &PowerOptions::default());
        assert!((res.estimate - 10.0).abs() < 1e-7);
    }
}
