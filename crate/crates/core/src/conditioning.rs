//! Fréchet derivative of the TLSE solution and its normwise, mixed and
//! componentwise condition numbers, with the compact bounds.
//!
//! Notation: `t = p + k`, `r = n + d - t`, `S₁ = diag(S_C, Σ̃₁)` and the
//! diagonal denominators `D[i·r + j] = s_i² - τ_i σ̃₂,j²` with `τ_i = 1` for
//! `i ≥ p`. An `r × t` matrix `Y` is indexed consistently with `vec(Y)`, so
//! `D⁻¹ vec(Y) = vec(Y ./ denom)` where `denom` is the `r × t` grid of those
//! entries. Explicit Kronecker assemblies are only formed when
//! `(n + d)(p + q)` stays within a size cap.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dense::{self, abs, block_diag, hstack, vstack};
use crate::error::{Gate, Result, TlseError};
use crate::kron::{self, kron};
use crate::matfree::{self, BreveOperator, PowerOptions};
use crate::tlse::{Dims, SingleDimAuxiliaries, TlseDecomposition, TlseProblem, TlseSolution};

/// Default bound on `(n + d)(p + q)` for explicit assembly.
pub const DEFAULT_EXPLICIT_CAP: usize = 10_000;

/// Compact blocks from which every factor of the derivative is built.
#[derive(Debug, Clone)]
pub struct ConditionFactors {
    pub dims: Dims,
    pub k: usize,
    pub t: usize,
    pub r: usize,
    pub x: DMatrix<f64>,
    /// `[0_{(n+d)×p} V̄₁]`, `(n+d) × t`.
    pub v_bar1_padded: DMatrix<f64>,
    pub v_bar2: DMatrix<f64>,
    pub v_hat11: DMatrix<f64>,
    pub v_hat21: DMatrix<f64>,
    pub v_bar22: DMatrix<f64>,
    /// `V̄₁₂ F_{V̄₂₂} = V̄₁₂ + X V̄₂₂`.
    pub v12f: DMatrix<f64>,
    pub v22_pinv: DMatrix<f64>,
    /// `(V̄₂₂V̄₂₂ᵀ)⁻¹`.
    pub gram_inv: DMatrix<f64>,
    /// `V̂₁₁†ᵀ` from an SVD-based pseudoinverse.
    pub v_hat11_pinv_t: DMatrix<f64>,
    pub s1: DVector<f64>,
    pub sigma2: DVector<f64>,
    /// `r × t` grid of the diagonal of `D`.
    pub denom: DMatrix<f64>,
    pub u_c: DMatrix<f64>,
    pub s_c: DVector<f64>,
    /// `ÃC̃†`, `q × p`.
    pub at_ctp: DMatrix<f64>,
    /// Bold `P = [I_p; 0]`.
    pub bold_p: DMatrix<f64>,
    /// Bold `Q = [-(ÃC̃†)ᵀ; I_q]`.
    pub bold_q: DMatrix<f64>,
    /// `QŨ₂`, `(p+q) × r`.
    pub qu2: DMatrix<f64>,
    /// `[PU_C  QŨ₁]`, `(p+q) × t`.
    pub pu_qu1: DMatrix<f64>,
    /// Lower block-triangular factor with `[PU_C QŨ₁]ᵀ[PU_C QŨ₁] = M Mᵀ`.
    pub mfac: DMatrix<f64>,
    pub cap: usize,
}

fn scale_cols(m: &DMatrix<f64>, s: &[f64]) -> DMatrix<f64> {
    let mut out = m.clone();
    for (mut col, v) in out.column_iter_mut().zip(s) {
        col *= *v;
    }
    out
}

/// Assembles the compact factor blocks for the rank stored in `decomp`.
pub fn build_factors(problem: &TlseProblem, decomp: &TlseDecomposition, solution: &TlseSolution) -> Result<ConditionFactors> {
    let dims = decomp.dims;
    let Dims { p, q, n, d } = dims;
    let (k, t, r) = (decomp.k, decomp.t(), decomp.r());

    let x = solution.x.clone();
    let v_bar2 = decomp.v_bar2();
    let v_bar12 = decomp.v_bar12();
    let v_bar22 = decomp.v_bar22();
    let v_hat11 = decomp.v_hat11();
    let v_hat21 = decomp.v_hat21();
    let v12f = &v_bar12 + &x * &v_bar22;
    let v22_pinv = kron::pinv_default(&v_bar22)?;
    let gram_inv = dense::spd_inverse(&(&v_bar22 * v_bar22.transpose()))?;
    let v_hat11_pinv_t = kron::pinv_default(&v_hat11)?.transpose();

    let mut v_bar1_padded = DMatrix::zeros(n + d, t);
    v_bar1_padded.columns_mut(p, k).copy_from(&decomp.v_bar1());

    let s1 = DVector::from_iterator(t, decomp.s_c.iter().chain(decomp.sigma1()).cloned());
    let sigma2 = DVector::from_column_slice(decomp.sigma2());
    let mut denom = DMatrix::zeros(r, t);
    for i in 0..t {
        let tau = if i >= p { 1.0 } else { 0.0 };
        for j in 0..r {
            let v = s1[i] * s1[i] - tau * sigma2[j] * sigma2[j];
            if !(v > 0.0) {
                return Err(TlseError::GateFailure {
                    gate: Gate::SingularValueGap,
                    k,
                    detail: format!("nonpositive denominator {v:.3e} at ({i}, {j})"),
                });
            }
            denom[(j, i)] = v;
        }
    }

    let at_ctp = problem.a_tilde() * decomp.c_tilde_pinv();
    let mut bold_p = DMatrix::zeros(p + q, p);
    bold_p.view_mut((0, 0), (p, p)).fill_with_identity();
    let bold_q = vstack(&(-at_ctp.transpose()), &DMatrix::identity(q, q));
    let qu2 = &bold_q * decomp.u2();
    let qu1 = &bold_q * decomp.u1();
    let pu_qu1 = hstack(&(&bold_p * &decomp.u_c), &qu1);

    let mut mfac = DMatrix::identity(t, t);
    let lower = -(decomp.u1().transpose() * &at_ctp * &decomp.u_c);
    mfac.view_mut((p, 0), (k, p)).copy_from(&lower);

    Ok(ConditionFactors {
        dims,
        k,
        t,
        r,
        x,
        v_bar1_padded,
        v_bar2,
        v_hat11,
        v_hat21,
        v_bar22,
        v12f,
        v22_pinv,
        gram_inv,
        v_hat11_pinv_t,
        s1,
        sigma2,
        denom,
        u_c: decomp.u_c.clone(),
        s_c: decomp.s_c.clone(),
        at_ctp,
        bold_p,
        bold_q,
        qu2,
        pu_qu1,
        mfac,
        cap: DEFAULT_EXPLICIT_CAP,
    })
}

impl ConditionFactors {
    pub fn with_cap(mut self, cap: usize) -> Self {
        self.cap = cap;
        self
    }

    /// Whether explicit Kronecker assembly is permitted.
    pub fn explicit_allowed(&self) -> bool {
        self.dims.cols() * self.dims.rows() <= self.cap
    }

    fn check_cap(&self) -> Result<()> {
        let entries = self.dims.cols() * self.dims.rows();
        if entries > self.cap {
            return Err(TlseError::SizeCap { entries, cap: self.cap });
        }
        Ok(())
    }

    /// `diag(0_p, I_k)`.
    pub fn w0(&self) -> DMatrix<f64> {
        let mut w = DMatrix::zeros(self.t, self.t);
        for i in self.dims.p..self.t {
            w[(i, i)] = 1.0;
        }
        w
    }

    /// Diagonal of `D`, length `t·r`.
    pub fn d_diag(&self) -> DVector<f64> {
        kron::vec(&self.denom)
    }

    /// `Mᵀ S₁`, the right factor acting on `F₂` in the reduced operator.
    pub fn reduced_right(&self) -> DMatrix<f64> {
        scale_cols(&self.mfac.transpose(), self.s1.as_slice())
    }

    /// `[PU_C S_C  QŨ₁Σ̃₁]`.
    pub fn pu_qu1_scaled(&self) -> DMatrix<f64> {
        scale_cols(&self.pu_qu1, self.s1.as_slice())
    }

    /// `QŨ₂Σ̃₂`.
    pub fn qu2_scaled(&self) -> DMatrix<f64> {
        scale_cols(&self.qu2, self.sigma2.as_slice())
    }

    pub fn h1(&self) -> Result<DMatrix<f64>> {
        self.check_cap()?;
        Ok(kron(&(&self.gram_inv * &self.v_hat21), &self.v12f))
    }

    pub fn h2(&self) -> Result<DMatrix<f64>> {
        self.check_cap()?;
        let raw = kron(&self.v22_pinv.transpose(), &self.v_hat11_pinv_t);
        Ok(kron::permute_cols(&raw, self.r, self.t))
    }

    pub fn h_sum(&self) -> Result<DMatrix<f64>> {
        Ok(self.h1()? + self.h2()?)
    }

    /// `G = D⁻¹ [I_t ⊗ Σ̃₂ᵀ  S₁ ⊗ I_r]`.
    pub fn g(&self) -> Result<DMatrix<f64>> {
        self.check_cap()?;
        let (t, r) = (self.t, self.r);
        let sigma2 = DMatrix::from_diagonal(&self.sigma2);
        let s1 = DMatrix::from_diagonal(&self.s1);
        let mut g = hstack(&kron(&DMatrix::identity(t, t), &sigma2), &kron(&s1, &DMatrix::identity(r, r)));
        for (mut row, dv) in g.row_iter_mut().zip(self.d_diag().iter()) {
            row /= *dv;
        }
        Ok(g)
    }

    /// `Ẑ = [[0 V̄₁]ᵀ ⊗ (QŨ₂)ᵀ ; Π_(t,r)(V̄₂ᵀ ⊗ [PU_C QŨ₁]ᵀ)]`.
    pub fn z_hat(&self) -> Result<DMatrix<f64>> {
        self.check_cap()?;
        let top = kron(&self.v_bar1_padded.transpose(), &self.qu2.transpose());
        let bottom = kron::permute_rows(self.t, self.r, &kron(&self.v_bar2.transpose(), &self.pu_qu1.transpose()));
        Ok(vstack(&top, &bottom))
    }

    /// `Z̄ = blockdiag(diag(0_p, I_k) ⊗ Ũ₂ᵀQᵀ, M ⊗ I_r)`, same column space
    /// norms as `Ẑ` after an orthogonal change of variables.
    pub fn z_bar(&self) -> Result<DMatrix<f64>> {
        self.check_cap()?;
        Ok(block_diag(
            &kron(&self.w0(), &self.qu2.transpose()),
            &kron(&self.mfac, &DMatrix::identity(self.r, self.r)),
        ))
    }

    pub fn n1(&self) -> Result<DMatrix<f64>> {
        self.check_cap()?;
        Ok(kron(&self.v_bar1_padded.transpose(), &self.qu2_scaled().transpose()))
    }

    pub fn n2(&self) -> Result<DMatrix<f64>> {
        self.check_cap()?;
        let raw = kron(&self.v_bar2.transpose(), &self.pu_qu1_scaled().transpose());
        Ok(kron::permute_rows(self.t, self.r, &raw))
    }

    /// `M = (H₁ + H₂) D⁻¹`.
    pub fn m(&self) -> Result<DMatrix<f64>> {
        let mut m = self.h_sum()?;
        for (mut col, dv) in m.column_iter_mut().zip(self.d_diag().iter()) {
            col /= *dv;
        }
        Ok(m)
    }

    /// `H̆ = (H₁ + H₂) G Z̄`.
    pub fn breve(&self) -> Result<DMatrix<f64>> {
        Ok(self.h_sum()? * self.g()? * self.z_bar()?)
    }
}

/// Explicit `K = (H₁ + H₂) G Ẑ`, `nd × (p+q)(n+d)`.
pub fn frechet_matrix(factors: &ConditionFactors) -> Result<DMatrix<f64>> {
    Ok(factors.h_sum()? * factors.g()? * factors.z_hat()?)
}

/// `K` through the product `M (N₁ + N₂)`.
pub fn frechet_matrix_mn(factors: &ConditionFactors) -> Result<DMatrix<f64>> {
    Ok(factors.m()? * (factors.n1()? + factors.n2()?))
}

/// How a reported number was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ExplicitKron,
    MatrixFree,
    ClosedFormD1,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::ExplicitKron => "explicit-kron",
            Method::MatrixFree => "matrix-free",
            Method::ClosedFormD1 => "closed-form-d1",
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum KappaMode {
    Explicit,
    MatrixFree(PowerOptions),
}

/// `κ_abs = ‖(H₁ + H₂) G Z̄‖₂`.
pub fn kappa_abs(factors: &ConditionFactors, mode: KappaMode) -> Result<f64> {
    match mode {
        KappaMode::Explicit => dense::spectral_norm(&factors.breve()?),
        KappaMode::MatrixFree(opts) => {
            let op = BreveOperator::new(factors);
            Ok(matfree::power_kappa_abs(&op, &opts).estimate)
        }
    }
}

/// `κ_rel = κ_abs ‖[L H]‖_F / ‖X_t‖_F`.
pub fn kappa_rel(kappa_abs: f64, problem: &TlseProblem, solution: &TlseSolution) -> Result<f64> {
    let xn = solution.x.norm();
    if xn == 0.0 {
        return Err(TlseError::Undefined("relative condition number of a zero solution".into()));
    }
    Ok(kappa_abs * problem.stacked().norm() / xn)
}

/// Compact normwise bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaBounds {
    pub upper: f64,
    pub lower: Option<f64>,
    pub rho_ac_1: f64,
    pub rho_ac_2: f64,
    pub eta_k_sigma: f64,
}

/// `η_k^σ = max{1, √(σ̃_k² + σ̃_{k+1}²)/(σ̃_k² - σ̃_{k+1}²)}`, and `1` for `k = 0`.
pub fn eta_k_sigma(sigma_tilde: &[f64], k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let (a, b) = (sigma_tilde[k - 1], sigma_tilde[k]);
    let gap = a * a - b * b;
    if gap <= 0.0 {
        return f64::INFINITY;
    }
    f64::max(1.0, (a * a + b * b).sqrt() / gap)
}

pub fn kappa_bounds(problem: &TlseProblem, decomp: &TlseDecomposition, solution: &TlseSolution) -> Result<KappaBounds> {
    let c_tilde = problem.c_tilde();
    let c_pinv = decomp.c_tilde_pinv();
    let at_ctp = problem.a_tilde() * &c_pinv;
    let rho_ac_1 = 1.0 + dense::spectral_norm(&c_tilde)? + dense::spectral_norm(&(&at_ctp * &c_tilde))?;
    let rho_ac_2 = 1.0 + dense::spectral_norm(&c_pinv)? + dense::spectral_norm(&at_ctp)?;
    let eta = eta_k_sigma(decomp.sigma_tilde.as_slice(), decomp.k);
    let xn = dense::spectral_norm(&solution.x)?;
    let upper = (1.0 + xn * xn) * rho_ac_2 * eta;
    let lower = if decomp.k == decomp.dims.n - decomp.dims.p {
        let denom = dense::spectral_norm(&decomp.v_hat11())? * dense::spectral_norm(&decomp.v_bar22())? * rho_ac_1;
        Some(eta / denom)
    } else {
        None
    };
    Ok(KappaBounds { upper, lower, rho_ac_1, rho_ac_2, eta_k_sigma: eta })
}

/// Mixed and componentwise numbers; `c` is `+∞` when a zero entry of `X_t`
/// meets a nonzero numerator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixedComponentwise {
    pub m: f64,
    pub c: f64,
}

/// `‖num‖_max / ‖X‖_max` and `max |num_ij| / |x_ij|` with `0/0 = 0`, `ξ/0 = ∞`.
fn mixed_and_componentwise(num: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<MixedComponentwise> {
    let xmax = dense::max_abs(x);
    if xmax == 0.0 {
        return Err(TlseError::Undefined("mixed condition number of a zero solution".into()));
    }
    let m = dense::max_abs(num) / xmax;
    let c = num.iter().zip(x.iter()).fold(0.0_f64, |acc, (&nv, &xv)| {
        let ratio = if xv != 0.0 {
            nv.abs() / xv.abs()
        } else if nv == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        acc.max(ratio)
    });
    Ok(MixedComponentwise { m, c })
}

/// Exact `m` and `c` from `|MN| vec([|L| |H|])`.
pub fn mixed_componentwise(factors: &ConditionFactors, problem: &TlseProblem) -> Result<MixedComponentwise> {
    let k = frechet_matrix_mn(factors)?;
    mixed_componentwise_from_k(&k, problem, &factors.x)
}

/// `m` and `c` for any explicit derivative matrix `K`.
pub fn mixed_componentwise_from_k(k: &DMatrix<f64>, problem: &TlseProblem, x: &DMatrix<f64>) -> Result<MixedComponentwise> {
    let weights = kron::vec(&abs(&problem.stacked()));
    let num = abs(k) * weights;
    mixed_and_componentwise(&kron::unvec(&num, x.nrows(), x.ncols()), x)
}

/// Kronecker-free upper bounds `m^u`, `c^u`.
pub fn mixed_componentwise_upper(factors: &ConditionFactors, problem: &TlseProblem) -> Result<MixedComponentwise> {
    let lh = abs(&problem.stacked());
    let upsilon = abs(&factors.qu2_scaled()).transpose() * &lh * abs(&factors.v_bar1_padded)
        + abs(&factors.v_bar2).transpose() * lh.transpose() * abs(&factors.pu_qu1_scaled());
    let y = upsilon.component_div(&factors.denom);
    let bound = abs(&factors.v_hat11_pinv_t) * y.transpose() * abs(&factors.v22_pinv)
        + abs(&factors.v12f) * &y * abs(&(factors.v_hat21.transpose() * &factors.gram_inv));
    mixed_and_componentwise(&bound, &factors.x)
}

/// `d = 1` compact form
/// `κ_abs = ‖(V̂₂₁ ⊗ (V̄₁₂ + xV̄₂₂) + (V̂₁₁ + xV̂₂₁) ⊗ V̄₂₂) G Z̄‖₂ / ‖V̄₂₂‖²`.
pub fn single_dim_kappa(factors: &ConditionFactors) -> Result<f64> {
    if factors.dims.d != 1 {
        return Err(TlseError::InvalidParameter("compact form needs d = 1".into()));
    }
    let x = &factors.x;
    let v22 = &factors.v_bar22;
    let h = (kron(&factors.v_hat21, &factors.v12f) + kron(&(&factors.v_hat11 + x * &factors.v_hat21), v22))
        / v22.norm_squared();
    dense::spectral_norm(&(h * factors.g()? * factors.z_bar()?))
}

/// Closed-form derivative `K = T₁ G(x) - T₂` for `d = 1`, `k = n - p`.
#[derive(Debug, Clone)]
pub struct SingleDimClosedForm {
    pub t1: DMatrix<f64>,
    pub t2: DMatrix<f64>,
    /// `G(x) = [xᵀ  -1] ⊗ I_{p+q}`.
    pub g_of_x: DMatrix<f64>,
    /// `u = [-(ÃC̃†)ᵀ r; r]`.
    pub u: DVector<f64>,
    /// `C_A† = (I - 𝒦AᵀA) C†`.
    pub c_a_pinv: DMatrix<f64>,
}

impl SingleDimClosedForm {
    pub fn k(&self) -> DMatrix<f64> {
        &self.t1 * &self.g_of_x - &self.t2
    }
}

pub fn single_dim_closed_k(problem: &TlseProblem, aux: &SingleDimAuxiliaries) -> Result<SingleDimClosedForm> {
    let Dims { p, q, n, d } = problem.dims();
    if d != 1 {
        return Err(TlseError::InvalidParameter("closed form needs d = 1".into()));
    }
    let m = p + q;
    let x = &aux.x_n;
    let at_ctp = problem.a_tilde() * kron::pinv_default(&problem.c_tilde())?;
    let mut u = DVector::zeros(m);
    u.rows_mut(0, p).copy_from(&(-(at_ctp.transpose() * &aux.r)));
    u.rows_mut(p, q).copy_from(&aux.r);

    let c_pinv = if p > 0 { kron::pinv_default(&problem.c)? } else { DMatrix::zeros(n, 0) };
    let k_at = &aux.k_cal * problem.a.transpose();
    let c_a_pinv = &c_pinv - &k_at * (&problem.a * &c_pinv);
    let t1 = (&aux.k_cal * x * u.transpose()) * (2.0 / (aux.rho * aux.rho)) - hstack(&c_a_pinv, &k_at);

    let mut xm1 = DMatrix::zeros(1, n + 1);
    xm1.view_mut((0, 0), (1, n)).copy_from(&x.transpose());
    xm1[(0, n)] = -1.0;
    let g_of_x = kron(&xm1, &DMatrix::identity(m, m));
    let mut in0 = DMatrix::zeros(n, n + 1);
    in0.view_mut((0, 0), (n, n)).fill_with_identity();
    let ut = DMatrix::from_row_slice(1, m, u.as_slice());
    let t2 = &aux.k_cal * kron(&in0, &ut);
    Ok(SingleDimClosedForm { t1, t2, g_of_x, u, c_a_pinv })
}

/// Serde adaptor writing non-finite values as strings (`"inf"`, `"-inf"`, `"nan"`).
pub mod float_or_str {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("invalid number {other:?}"))),
            },
        }
    }

    pub mod option {
        use serde::{Deserialize, Deserializer, Serializer};

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(x) => super::serialize(x, s),
                None => s.serialize_none(),
            }
        }

        #[derive(Deserialize)]
        struct Wrap(#[serde(deserialize_with = "super::deserialize")] f64);

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            Ok(Option::<Wrap>::deserialize(d)?.map(|w| w.0))
        }
    }
}

/// A scalar together with the method that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tagged {
    #[serde(with = "float_or_str")]
    pub value: f64,
    pub method: Method,
}

/// Every condition number of one instance, with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub k: usize,
    pub t: usize,
    pub kappa_abs: Tagged,
    /// Matrix-free estimate when the explicit value is the headline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_abs_matrix_free: Option<Tagged>,
    #[serde(with = "float_or_str::option")]
    pub kappa_rel: Option<f64>,
    pub kappa_abs_upper: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_abs_lower: Option<f64>,
    pub m: Option<Tagged>,
    pub c: Option<Tagged>,
    #[serde(with = "float_or_str")]
    pub m_upper: f64,
    #[serde(with = "float_or_str")]
    pub c_upper: f64,
    pub rho_ac_1: f64,
    pub rho_ac_2: f64,
    pub eta_k_sigma: f64,
    /// `‖K_closed - K‖_max / ‖K‖_max` for `d = 1`, `k = n - p`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closed_form_deviation: Option<f64>,
    pub power_iterations: usize,
    pub power_converged: bool,
    /// Reasons for quantities that were skipped.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportMode {
    /// Explicit under the cap, matrix-free above it.
    Auto,
    Explicit,
    MatrixFree,
}

#[derive(Debug, Clone, Copy)]
pub struct ConditionOptions {
    pub mode: ReportMode,
    pub cap: usize,
    pub power: PowerOptions,
}

impl Default for ConditionOptions {
    fn default() -> Self {
        ConditionOptions { mode: ReportMode::Auto, cap: DEFAULT_EXPLICIT_CAP, power: PowerOptions::default() }
    }
}

/// Computes every number in [`ConditionReport`].
pub fn condition_report(
    problem: &TlseProblem,
    decomp: &TlseDecomposition,
    solution: &TlseSolution,
    opts: &ConditionOptions,
) -> Result<ConditionReport> {
    let factors = build_factors(problem, decomp, solution)?.with_cap(opts.cap);
    let explicit = match opts.mode {
        ReportMode::Auto => factors.explicit_allowed(),
        ReportMode::Explicit => {
            factors.check_cap()?;
            true
        }
        ReportMode::MatrixFree => false,
    };
    let mut notes = Vec::new();
    let power = matfree::power_kappa_abs(&BreveOperator::new(&factors), &opts.power);
    if !power.converged {
        notes.push(format!("power iteration did not converge in {} iterations", power.iterations));
    }
    let mf = Tagged { value: power.estimate, method: Method::MatrixFree };
    let (kappa, kappa_mf) = if explicit {
        let v = kappa_abs(&factors, KappaMode::Explicit)?;
        (Tagged { value: v, method: Method::ExplicitKron }, Some(mf))
    } else {
        if factors.explicit_allowed() {
            notes.push("explicit κ_abs not requested".into());
        } else {
            notes.push("explicit κ_abs skipped (size cap)".into());
        }
        (mf, None)
    };
    let kappa_rel = match kappa_rel(kappa.value, problem, solution) {
        Ok(v) => Some(v),
        Err(e) => {
            notes.push(e.to_string());
            None
        }
    };
    let bounds = kappa_bounds(problem, decomp, solution)?;

    let dims = decomp.dims;
    let mut closed_form_deviation = None;
    let (mut m, mut c) = (None, None);
    if explicit {
        let k_mat = frechet_matrix_mn(&factors)?;
        match mixed_componentwise_from_k(&k_mat, problem, &solution.x) {
            Ok(mc) => {
                m = Some(Tagged { value: mc.m, method: Method::ExplicitKron });
                c = Some(Tagged { value: mc.c, method: Method::ExplicitKron });
            }
            Err(e) => notes.push(e.to_string()),
        }
        if dims.d == 1 && decomp.k == dims.n - dims.p {
            match crate::tlse::solve_single_dim(problem).and_then(|aux| single_dim_closed_k(problem, &aux)) {
                Ok(cf) => {
                    let scale = dense::max_abs(&k_mat);
                    closed_form_deviation = Some(dense::max_abs(&(cf.k() - &k_mat)) / scale);
                }
                Err(e) => notes.push(format!("closed-form cross-check skipped: {e}")),
            }
        }
    } else {
        notes.push("m and c skipped (size cap)".into());
    }
    let upper = mixed_componentwise_upper(&factors, problem)?;

    Ok(ConditionReport {
        k: decomp.k,
        t: decomp.t(),
        kappa_abs: kappa,
        kappa_abs_matrix_free: kappa_mf,
        kappa_rel,
        kappa_abs_upper: bounds.upper,
        kappa_abs_lower: bounds.lower,
        m,
        c,
        m_upper: upper.m,
        c_upper: upper.c,
        rho_ac_1: bounds.rho_ac_1,
        rho_ac_2: bounds.rho_ac_2,
        eta_k_sigma: bounds.eta_k_sigma,
        closed_form_deviation,
        power_iterations: power.iterations,
        power_converged: power.converged,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tlse::{solve_full, SolveOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(seed: u64, p: usize, q: usize, n: usize, d: usize) -> TlseProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = |r, c| DMatrix::from_fn(r, c, |_, _| rng.random::<f64>());
        let (a, b, c, dd) = (u(q, n), u(q, d), u(p, n), u(p, d));
        TlseProblem::new(a, b, c, dd).unwrap()
    }

    fn setup(seed: u64, p: usize, q: usize, n: usize, d: usize, t: Option<usize>) -> (TlseProblem, TlseDecomposition, TlseSolution, ConditionFactors) {
        let pb = random_problem(seed, p, q, n, d);
        let opts = SolveOptions { requested_t: t, ..Default::default() };
        let (dec, sol) = solve_full(&pb, &opts).unwrap();
        let f = build_factors(&pb, &dec, &sol).unwrap();
        (pb, dec, sol, f)
    }

    #[test]
    fn h1_vanishes_at_full_rank_index() {
        let (_, dec, _, f) = setup(1, 2, 12, 6, 2, None);
        assert_eq!(dec.k, 4);
        assert!(f.h1().unwrap().amax() < 1e-13);
    }

    #[test]
    fn denominators_positive_and_minimum_matches_gap() {
        let (_, dec, _, f) = setup(2, 2, 12, 6, 2, Some(4));
        assert!(f.denom.iter().all(|&v| v > 0.0));
        // τ = 1 pairs reach their minimum at σ̃_k² - σ̃_{k+1}²
        let s = dec.sigma_tilde.as_slice();
        let gap = s[1] * s[1] - s[2] * s[2];
        let min_data = f.denom.columns(2, dec.k).min();
        assert!((min_data - gap).abs() < 1e-14);
    }

    #[test]
    fn unconstrained_reduction_of_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pb = TlseProblem::unconstrained(
            DMatrix::from_fn(10, 4, |_, _| rng.random::<f64>()),
            DMatrix::from_fn(10, 2, |_, _| rng.random::<f64>()),
        )
        .unwrap();
        let (dec, sol) = solve_full(&pb, &SolveOptions::with_t(3)).unwrap();
        let f = build_factors(&pb, &dec, &sol).unwrap();
        assert_eq!(f.bold_q, DMatrix::identity(10, 10));
        assert_eq!(f.s_c.len(), 0);
        let s = dec.sigma_tilde.as_slice();
        for i in 0..3 {
            for j in 0..3 {
                assert!((f.denom[(j, i)] - (s[i] * s[i] - s[3 + j] * s[3 + j])).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mfac_factors_gram_of_reduced_basis() {
        let (_, _, _, f) = setup(4, 3, 14, 7, 2, Some(5));
        let gram = f.pu_qu1.transpose() * &f.pu_qu1;
        assert!((gram - &f.mfac * f.mfac.transpose()).amax() < 1e-12);
    }

    #[test]
    fn frechet_matches_central_differences() {
        let (pb, dec, sol, f) = setup(5, 2, 10, 5, 2, None);
        let k = frechet_matrix(&f).unwrap();
        let dims = pb.dims();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dir = DMatrix::from_fn(dims.rows(), dims.cols(), |_, _| rng.random_range(-1.0..1.0));
        let dir = &dir / dir.norm();
        let h = 1e-6;
        let opts = SolveOptions::with_t(sol.t);
        let xp = crate::tlse::solve(&TlseProblem::from_stacked(dims, &(pb.stacked() + &dir * h)).unwrap(), &opts).unwrap().x;
        let xm = crate::tlse::solve(&TlseProblem::from_stacked(dims, &(pb.stacked() - &dir * h)).unwrap(), &opts).unwrap().x;
        let fd = (xp - xm) / (2.0 * h);
        let lin = kron::unvec(&(&k * kron::vec(&dir)), dims.n, dims.d);
        let knorm = dense::spectral_norm(&k).unwrap();
        assert!((fd - lin).norm() <= 1e-5 * knorm, "dec k = {}", dec.k);
    }

    #[test]
    fn zero_direction_maps_to_zero() {
        let (pb, _, _, f) = setup(7, 1, 8, 4, 1, None);
        let k = frechet_matrix(&f).unwrap();
        let z = DVector::zeros(pb.dims().rows() * pb.dims().cols());
        assert_eq!((&k * z).amax(), 0.0);
    }

    #[test]
    fn reduced_and_full_norms_agree() {
        for (seed, t) in [(8, None), (9, Some(3)), (10, Some(2))] {
            let (_, _, _, f) = setup(seed, 2, 12, 6, 2, t);
            let k = frechet_matrix(&f).unwrap();
            let a = dense::spectral_norm(&k).unwrap();
            let b = kappa_abs(&f, KappaMode::Explicit).unwrap();
            assert!((a - b).abs() <= 1e-12 * a);
        }
    }

    #[test]
    fn mn_equals_k() {
        let (_, _, _, f) = setup(11, 3, 12, 8, 2, Some(5));
        let k = frechet_matrix(&f).unwrap();
        let mn = frechet_matrix_mn(&f).unwrap();
        assert!((mn - &k).amax() <= 1e-10 * k.amax());
    }

    #[test]
    fn kappa_rel_ratio_is_exact() {
        let (pb, _, sol, f) = setup(12, 2, 10, 5, 1, None);
        let ka = kappa_abs(&f, KappaMode::Explicit).unwrap();
        let kr = kappa_rel(ka, &pb, &sol).unwrap();
        assert!((kr / ka - pb.stacked().norm() / sol.x.norm()).abs() < 1e-12 * kr / ka);
    }

    #[test]
    fn kappa_rel_of_zero_solution_is_undefined() {
        let (pb, _, mut sol, _) = setup(13, 1, 8, 3, 1, None);
        sol.x.fill(0.0);
        assert!(matches!(kappa_rel(1.0, &pb, &sol), Err(TlseError::Undefined(_))));
    }

    #[test]
    fn eta_formula_cases() {
        assert_eq!(eta_k_sigma(&[2.0, 0.0], 1), 1.0);
        assert!((eta_k_sigma(&[0.5, 0.0], 1) - 2.0).abs() < 1e-15);
        assert_eq!(eta_k_sigma(&[3.0, 1.0], 0), 1.0);
    }

    #[test]
    fn unconstrained_upper_bound_reduces() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let pb = TlseProblem::unconstrained(
            DMatrix::from_fn(9, 4, |_, _| rng.random::<f64>()),
            DMatrix::from_fn(9, 1, |_, _| rng.random::<f64>()),
        )
        .unwrap();
        let (dec, sol) = solve_full(&pb, &SolveOptions::default()).unwrap();
        let b = kappa_bounds(&pb, &dec, &sol).unwrap();
        assert_eq!(b.rho_ac_2, 1.0);
        let s = dec.sigma_tilde.as_slice();
        let raw = (s[3] * s[3] + s[4] * s[4]).sqrt() / (s[3] * s[3] - s[4] * s[4]);
        let xn = dense::spectral_norm(&sol.x).unwrap();
        assert!((b.upper - (1.0 + xn * xn) * raw.max(1.0)).abs() <= 1e-12 * b.upper);
    }

    #[test]
    fn sandwich_and_dominance_small_sweep() {
        for seed in 0..10 {
            let (pb, dec, sol, f) = setup(100 + seed, 2, 10, 5, 2, None);
            let b = kappa_bounds(&pb, &dec, &sol).unwrap();
            let ka = kappa_abs(&f, KappaMode::Explicit).unwrap();
            assert!(b.lower.unwrap() <= ka && ka <= b.upper);
            let mc = mixed_componentwise(&f, &pb).unwrap();
            let up = mixed_componentwise_upper(&f, &pb).unwrap();
            assert!(mc.m <= up.m * (1.0 + 1e-12) && mc.c <= up.c * (1.0 + 1e-12));
            assert!(mc.m <= mc.c * (1.0 + 1e-12));
        }
    }

    #[test]
    fn componentwise_convention_for_zero_entries() {
        let num = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let x = DMatrix::from_row_slice(2, 1, &[2.0, 0.0]);
        assert_eq!(mixed_and_componentwise(&num, &x).unwrap().c, 0.5);
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        assert_eq!(mixed_and_componentwise(&num, &x).unwrap().c, f64::INFINITY);
    }

    #[test]
    fn single_dim_compact_form_matches() {
        for (seed, t) in [(15, None), (16, Some(3))] {
            let (_, dec, _, f) = setup(seed, 1, 10, 5, 1, t);
            let general = kappa_abs(&f, KappaMode::Explicit).unwrap();
            let compact = single_dim_kappa(&f).unwrap();
            assert!((general - compact).abs() <= 1e-10 * general, "k = {}", dec.k);
        }
    }

    #[test]
    fn closed_form_k_matches_general_path() {
        let (pb, _, _, f) = setup(17, 2, 10, 5, 1, None);
        let k = frechet_matrix(&f).unwrap();
        let aux = crate::tlse::solve_single_dim(&pb).unwrap();
        let cf = single_dim_closed_k(&pb, &aux).unwrap();
        assert!((cf.k() - &k).amax() <= 1e-10 * k.amax());
    }

    #[test]
    fn closed_form_collapses_on_consistent_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let (p, q, n) = (1, 9, 4);
        let a = DMatrix::from_fn(q, n, |_, _| rng.random::<f64>());
        let c = DMatrix::from_fn(p, n, |_, _| rng.random::<f64>());
        let xs = DMatrix::from_fn(n, 1, |_, _| rng.random::<f64>());
        let pb = TlseProblem::new(a.clone(), &a * &xs, c.clone(), &c * &xs).unwrap();
        let aux = crate::tlse::solve_single_dim(&pb).unwrap();
        let cf = single_dim_closed_k(&pb, &aux).unwrap();
        assert!(cf.u.amax() < 1e-12);
        assert!(cf.t2.amax() < 1e-12);
    }

    #[test]
    fn explicit_cap_is_enforced() {
        let (_, _, _, f) = setup(19, 1, 8, 4, 1, None);
        let f = f.with_cap(10);
        assert!(matches!(frechet_matrix(&f), Err(TlseError::SizeCap { .. })));
    }

    #[test]
    fn report_round_trips_through_json() {
        let pb = random_problem(20, 2, 10, 5, 1);
        let (dec, sol) = solve_full(&pb, &SolveOptions::default()).unwrap();
        let rep = condition_report(&pb, &dec, &sol, &ConditionOptions::default()).unwrap();
        assert!(rep.closed_form_deviation.unwrap() < 1e-10);
        let s = serde_json::to_string(&rep).unwrap();
        let back: ConditionReport = serde_json::from_str(&s).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), s);
    }
}
