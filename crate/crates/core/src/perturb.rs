//! Perturbation experiments: first-order estimates against re-solves,
//! finite-difference sup oracle for `κ_abs`, convergence of the weighted
//! unconstrained solution, and forward-error reports.
//!
//! Every randomized routine takes a seed and draws trial `i` from
//! `ChaCha8Rng` stream `i` of that seed.

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{self, build_factors, float_or_str, ConditionFactors, ConditionOptions};
use crate::dense;
use crate::error::{Result, TlseError};
use crate::generate::{normal_matrix, trial_rng, uniform_matrix};
use crate::kron;
use crate::matfree::FrechetOperator;
use crate::tlse::{self, solve_full, Dims, SolveOptions, TlseProblem};

/// `[ΔL ΔH]` with rows ordered as `[C; A]`, `[D; B]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationPair {
    pub dl: DMatrix<f64>,
    pub dh: DMatrix<f64>,
}

impl PerturbationPair {
    pub fn from_stacked(dims: Dims, delta: &DMatrix<f64>) -> Result<Self> {
        if delta.shape() != (dims.rows(), dims.cols()) {
            return Err(TlseError::DimensionMismatch(format!(
                "perturbation is {}x{}, expected {}x{}",
                delta.nrows(),
                delta.ncols(),
                dims.rows(),
                dims.cols()
            )));
        }
        Ok(PerturbationPair {
            dl: delta.columns(0, dims.n).into_owned(),
            dh: delta.columns(dims.n, dims.d).into_owned(),
        })
    }

    pub fn zero(dims: Dims) -> Self {
        PerturbationPair { dl: DMatrix::zeros(dims.rows(), dims.n), dh: DMatrix::zeros(dims.rows(), dims.d) }
    }

    pub fn stacked(&self) -> DMatrix<f64> {
        dense::hstack(&self.dl, &self.dh)
    }

    fn check(&self, dims: Dims) -> Result<()> {
        if self.dl.shape() != (dims.rows(), dims.n) || self.dh.shape() != (dims.rows(), dims.d) {
            return Err(TlseError::DimensionMismatch("perturbation blocks do not match the problem".into()));
        }
        if self.dl.iter().chain(self.dh.iter()).any(|v| !v.is_finite()) {
            return Err(TlseError::NonFinite("perturbation"));
        }
        Ok(())
    }

    /// The problem with `[L H] + [ΔL ΔH]`.
    pub fn apply(&self, problem: &TlseProblem) -> Result<TlseProblem> {
        let dims = problem.dims();
        self.check(dims)?;
        TlseProblem::from_stacked(dims, &(problem.stacked() + self.stacked()))
    }
}

/// `unvec(K vec([ΔL ΔH]))`, applied without forming `K`.
pub fn first_order_estimate(factors: &ConditionFactors, delta: &PerturbationPair) -> Result<DMatrix<f64>> {
    delta.check(factors.dims)?;
    Ok(FrechetOperator::new(factors).apply_matrix(&delta.stacked()))
}

/// `ΔL = ε E ⊙ L`, `ΔH = ε E' ⊙ H` with `E, E'` iid uniform on `(0, 1)`.
pub fn componentwise_perturbation(problem: &TlseProblem, eps: f64, seed: u64) -> Result<PerturbationPair> {
    componentwise_perturbation_with(problem, eps, &mut trial_rng(seed, 0))
}

pub fn componentwise_perturbation_with(problem: &TlseProblem, eps: f64, rng: &mut ChaCha8Rng) -> Result<PerturbationPair> {
    if !(eps >= 0.0) {
        return Err(TlseError::InvalidParameter(format!("eps = {eps} must be nonnegative")));
    }
    let dims = problem.dims();
    let lh = problem.stacked();
    let e = uniform_matrix(rng, dims.rows(), dims.cols());
    PerturbationPair::from_stacked(dims, &(lh.component_mul(&e) * eps))
}

/// One row of [`perturbation_error_study`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaRow {
    pub eps: f64,
    /// `‖vec(ΔX_t) - K vec(Δ)‖_∞`, absent when the trial was invalid.
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
}

/// For each `ε`, perturbs all data by `ε · uniform(0, 1)` entries, re-solves
/// at the same `t` and compares with the first-order estimate.
pub fn perturbation_error_study(problem: &TlseProblem, t: usize, eps_list: &[f64], seed: u64) -> Result<Vec<EtaRow>> {
    let opts = SolveOptions::with_t(t);
    let (decomp, sol) = solve_full(problem, &opts)?;
    let factors = build_factors(problem, &decomp, &sol)?;
    let dims = problem.dims();
    let mut rows = Vec::with_capacity(eps_list.len());
    for (i, &eps) in eps_list.iter().enumerate() {
        let mut rng = trial_rng(seed, i as u64);
        let delta = PerturbationPair::from_stacked(dims, &(uniform_matrix(&mut rng, dims.rows(), dims.cols()) * eps))?;
        let estimate = first_order_estimate(&factors, &delta)?;
        match delta.apply(problem).and_then(|pb| tlse::solve(&pb, &opts)) {
            Ok(perturbed) => {
                let actual = perturbed.x - &sol.x;
                rows.push(EtaRow { eps, eta: Some(dense::max_abs(&(actual - estimate))), flag: None });
            }
            Err(e) if e.is_infeasible() => rows.push(EtaRow { eps, eta: None, flag: Some(e.to_string()) }),
            Err(e) => return Err(e),
        }
    }
    Ok(rows)
}

/// Outcome of [`sample_derivative_sup`].
#[derive(Debug, Clone, PartialEq)]
pub struct SupEstimate {
    pub value: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

/// Forward-difference `‖X(data + hΔ) - X(data)‖_F / h` for a unit-Frobenius `Δ`.
pub fn directional_derivative_norm(problem: &TlseProblem, t: usize, base: &DMatrix<f64>, direction: &DMatrix<f64>, h: f64) -> Result<f64> {
    let dims = problem.dims();
    let dir = direction / direction.norm();
    let moved = TlseProblem::from_stacked(dims, &(problem.stacked() + dir * h))?;
    let x = tlse::solve(&moved, &SolveOptions::with_t(t))?.x;
    Ok((x - base).norm() / h)
}

/// Empirical lower bound for `κ_abs`: the largest forward-difference
/// derivative norm over `n_samples` random unit directions plus any
/// caller-supplied directions. `h` defaults to `1e-7 ‖[L H]‖_F`.
pub fn sample_derivative_sup(
    problem: &TlseProblem,
    t: usize,
    n_samples: usize,
    h: Option<f64>,
    seed: u64,
    extra_directions: &[DMatrix<f64>],
) -> Result<SupEstimate> {
    if n_samples == 0 && extra_directions.is_empty() {
        return Err(TlseError::InvalidParameter("at least one sample is required".into()));
    }
    let dims = problem.dims();
    let h = h.unwrap_or(1e-7 * problem.stacked().norm());
    let base = tlse::solve(problem, &SolveOptions::with_t(t))?.x;
    let mut out = SupEstimate { value: 0.0, evaluated: 0, skipped: 0 };
    let random = (0..n_samples).map(|i| normal_matrix(&mut trial_rng(seed, i as u64), dims.rows(), dims.cols()));
    for dir in random.chain(extra_directions.iter().cloned()) {
        match directional_derivative_norm(problem, t, &base, &dir, h) {
            Ok(v) => {
                out.value = out.value.max(v);
                out.evaluated += 1;
            }
            Err(e) if e.is_infeasible() => out.skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WtlsRow {
    pub eps: f64,
    /// `‖X_t(ε) - X_t‖_F`.
    pub error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WtlsStudy {
    pub rows: Vec<WtlsRow>,
    /// Least-squares slope of `log error` against `log ε`.
    pub slope: Option<f64>,
}

/// Least-squares slope through `(log x, log y)` pairs.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx)
}

/// Errors of the weighted unconstrained solution at the same `t` as `ε → 0`.
pub fn wtls_convergence_study(problem: &TlseProblem, t: usize, eps_list: &[f64], rank_tol: f64) -> Result<WtlsStudy> {
    let x = tlse::solve(problem, &SolveOptions::with_t(t))?.x;
    let mut rows = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        match tlse::wtls_solve(problem, eps, t, rank_tol) {
            Ok(xw) => rows.push(WtlsRow { eps, error: Some((xw - &x).norm()), flag: None }),
            Err(e) if e.is_infeasible() || matches!(e, TlseError::Numerical(_)) => {
                rows.push(WtlsRow { eps, error: None, flag: Some(e.to_string()) })
            }
            Err(e) => return Err(e),
        }
    }
    let pts: Vec<(f64, f64)> = rows.iter().filter_map(|r| r.error.map(|e| (r.eps, e))).collect();
    // errors at roundoff level carry no rate information
    let scale = x.norm().max(1.0);
    let informative: Vec<(f64, f64)> = pts.into_iter().filter(|(_, e)| *e > 1e-13 * scale).collect();
    Ok(WtlsStudy { slope: loglog_slope(&informative), rows })
}

/// Forward errors of one perturbed solve against first-order bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardErrorReport {
    pub t: usize,
    pub x_norm2_sq: f64,
    /// `ρ = ρ_AC^(2) η_k^σ`.
    pub rho: f64,
    pub eps_n: f64,
    #[serde(with = "float_or_str")]
    pub eps_c: f64,
    pub actual_rel_2norm: f64,
    pub actual_rel_maxnorm: f64,
    #[serde(with = "float_or_str")]
    pub actual_componentwise: f64,
    pub kappa_rel: f64,
    pub kappa_rel_upper: f64,
    #[serde(with = "float_or_str")]
    pub m: f64,
    #[serde(with = "float_or_str")]
    pub m_upper: f64,
    #[serde(with = "float_or_str")]
    pub c: f64,
    #[serde(with = "float_or_str")]
    pub c_upper: f64,
    pub bound_n: f64,
    pub bound_n_upper: f64,
    #[serde(with = "float_or_str")]
    pub bound_m: f64,
    #[serde(with = "float_or_str")]
    pub bound_m_upper: f64,
    #[serde(with = "float_or_str")]
    pub bound_c: f64,
    #[serde(with = "float_or_str")]
    pub bound_c_upper: f64,
}

/// `max |Δ_ij| / |M_ij|` with `0/0 = 0` and `ξ/0 = ∞`.
fn componentwise_ratio(num: &DMatrix<f64>, den: &DMatrix<f64>) -> f64 {
    num.iter().zip(den.iter()).fold(0.0_f64, |acc, (&n, &d)| {
        let r = if d != 0.0 {
            n.abs() / d.abs()
        } else if n == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        acc.max(r)
    })
}

/// Solves the original and perturbed problems at the same `t` (the default
/// selection when `t` is `None`) and collects actual errors and bounds.
pub fn forward_error_report(
    problem: &TlseProblem,
    t: Option<usize>,
    delta: &PerturbationPair,
    opts: &ConditionOptions,
) -> Result<ForwardErrorReport> {
    delta.check(problem.dims())?;
    let (decomp, sol) = solve_full(problem, &SolveOptions { requested_t: t, ..Default::default() })?;
    let perturbed = tlse::solve(&delta.apply(problem)?, &SolveOptions::with_t(sol.t))?;
    let report = conditioning::condition_report(problem, &decomp, &sol, opts)?;

    let lh = problem.stacked();
    let dstack = delta.stacked();
    let eps_n = dstack.norm() / lh.norm();
    let eps_c = componentwise_ratio(&dstack, &lh);
    let dx = &perturbed.x - &sol.x;
    let x = &sol.x;
    let undefined = || TlseError::Undefined("forward error report needs explicit m and c".into());
    let m = report.m.ok_or_else(undefined)?.value;
    let c = report.c.ok_or_else(undefined)?.value;
    let kappa_rel = report.kappa_rel.ok_or_else(|| TlseError::Undefined("relative condition number".into()))?;
    let kappa_rel_upper = report.kappa_abs_upper * lh.norm() / x.norm();
    let xn2 = dense::spectral_norm(x)?;
    Ok(ForwardErrorReport {
        t: sol.t,
        x_norm2_sq: xn2 * xn2,
        rho: report.rho_ac_2 * report.eta_k_sigma,
        eps_n,
        eps_c,
        actual_rel_2norm: dx.norm() / x.norm(),
        actual_rel_maxnorm: dense::max_abs(&dx) / dense::max_abs(x),
        actual_componentwise: componentwise_ratio(&dx, x),
        kappa_rel,
        kappa_rel_upper,
        m,
        m_upper: report.m_upper,
        c,
        c_upper: report.c_upper,
        bound_n: eps_n * kappa_rel,
        bound_n_upper: eps_n * kappa_rel_upper,
        bound_m: eps_c * m,
        bound_m_upper: eps_c * report.m_upper,
        bound_c: eps_c * c,
        bound_c_upper: eps_c * report.c_upper,
    })
}

/// `vec` helper re-exported for callers assembling directions from `K`.
pub fn direction_from_vec(dims: Dims, v: &nalgebra::DVector<f64>) -> DMatrix<f64> {
    kron::unvec(v, dims.rows(), dims.cols())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{frechet_matrix, kappa_abs, KappaMode};
    use crate::generate::{gen_controlled, gen_uniform};

    #[test]
    fn zero_perturbation_gives_zero_estimate() {
        let pb = gen_uniform(2, 10, 5, 2, 1).unwrap();
        let (dec, sol) = solve_full(&pb, &SolveOptions::default()).unwrap();
        let f = build_factors(&pb, &dec, &sol).unwrap();
        let est = first_order_estimate(&f, &PerturbationPair::zero(pb.dims())).unwrap();
        assert_eq!(est.amax(), 0.0);
    }

    #[test]
    fn estimate_is_linear() {
        let pb = gen_uniform(2, 10, 5, 2, 2).unwrap();
        let (dec, sol) = solve_full(&pb, &SolveOptions::default()).unwrap();
        let f = build_factors(&pb, &dec, &sol).unwrap();
        let delta = componentwise_perturbation(&pb, 1.0, 3).unwrap();
        let scaled = PerturbationPair { dl: &delta.dl * 3.5, dh: &delta.dh * 3.5 };
        let a = first_order_estimate(&f, &delta).unwrap() * 3.5;
        let b = first_order_estimate(&f, &scaled).unwrap();
        assert!((&a - &b).amax() <= 1e-14 * b.amax());
    }

    #[test]
    fn mismatched_perturbation_rejected() {
        let pb = gen_uniform(2, 10, 5, 2, 4).unwrap();
        let bad = PerturbationPair { dl: DMatrix::zeros(3, 5), dh: DMatrix::zeros(12, 2) };
        assert!(matches!(bad.apply(&pb), Err(TlseError::DimensionMismatch(_))));
    }

    #[test]
    fn componentwise_perturbation_respects_entrywise_bound() {
        let pb = gen_controlled(10.0, 0.01, 5).unwrap();
        let lh = pb.stacked();
        let delta = componentwise_perturbation(&pb, 1e-3, 6).unwrap().stacked();
        assert!(delta.iter().zip(lh.iter()).all(|(d, l)| d.abs() <= 1e-3 * l.abs()));
        assert!(componentwise_ratio(&delta, &lh) <= 1e-3);
        let zero = componentwise_perturbation(&pb, 0.0, 6).unwrap();
        assert_eq!(zero.stacked().amax(), 0.0);
    }

    #[test]
    fn eta_scales_quadratically() {
        let pb = gen_uniform(2, 12, 6, 2, 7).unwrap();
        let rows = perturbation_error_study(&pb, 5, &[1e-2, 1e-4, 0.0], 8).unwrap();
        let e: Vec<f64> = rows.iter().map(|r| r.eta.unwrap()).collect();
        assert!(e[0] / e[1] > 1e2 && e[0] / e[1] < 1e6);
        assert_eq!(e[2], 0.0);
    }

    #[test]
    fn sup_oracle_is_bounded_and_reproducible() {
        let pb = gen_uniform(1, 8, 4, 1, 9).unwrap();
        let (dec, sol) = solve_full(&pb, &SolveOptions::default()).unwrap();
        let f = build_factors(&pb, &dec, &sol).unwrap();
        let kappa = kappa_abs(&f, KappaMode::Explicit).unwrap();
        let est = sample_derivative_sup(&pb, sol.t, 30, None, 10, &[]).unwrap();
        assert!(est.value <= kappa * (1.0 + 1e-4));
        let again = sample_derivative_sup(&pb, sol.t, 1, None, 10, &[]).unwrap();
        let again2 = sample_derivative_sup(&pb, sol.t, 1, None, 10, &[]).unwrap();
        assert_eq!(again.value.to_bits(), again2.value.to_bits());

        let k = frechet_matrix(&f).unwrap();
        let svd = dense::svd(&k).unwrap();
        let top = direction_from_vec(pb.dims(), &svd.v.column(0).into_owned());
        let aligned = sample_derivative_sup(&pb, sol.t, 0, None, 0, &[top]).unwrap();
        assert!(aligned.value >= 0.999 * kappa);
    }

    #[test]
    fn wtls_unconstrained_is_exact() {
        let pb = gen_uniform(0, 10, 4, 1, 11).unwrap();
        let study = wtls_convergence_study(&pb, 4, &[1e-2, 1e-3], 1e-8).unwrap();
        assert!(study.rows.iter().all(|r| r.error.unwrap() < 1e-12));
        assert!(study.slope.is_none());
    }

    #[test]
    fn wtls_rate_window() {
        let pb = gen_uniform(2, 12, 6, 1, 12).unwrap();
        let study = wtls_convergence_study(&pb, 6, &[1e-2, 1e-3], 1e-8).unwrap();
        let r = study.rows[0].error.unwrap() / study.rows[1].error.unwrap();
        assert!((50.0..=200.0).contains(&r), "ratio {r}");
    }

    #[test]
    fn slope_of_exact_power_law() {
        let pts: Vec<(f64, f64)> = [1e-2, 1e-3, 1e-4].iter().map(|&e: &f64| (e, 3.0 * e * e)).collect();
        assert!((loglog_slope(&pts).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn forward_error_dominance_single_trial() {
        let pb = gen_controlled(1e3, 0.01, 13).unwrap();
        let delta = componentwise_perturbation(&pb, 1e-12, 14).unwrap();
        let rep = forward_error_report(&pb, Some(8), &delta, &ConditionOptions::default()).unwrap();
        assert!(rep.eps_c <= 1e-12);
        assert!(rep.actual_rel_2norm <= rep.bound_n * (1.0 + 1e-3));
        assert!(rep.actual_rel_maxnorm <= rep.bound_m * (1.0 + 1e-3));
        assert!(rep.actual_componentwise <= rep.bound_c * (1.0 + 1e-3));
        assert!(rep.bound_m <= rep.bound_m_upper * (1.0 + 1e-12));
    }
}
