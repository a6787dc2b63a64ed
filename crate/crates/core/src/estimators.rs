//! Shrinkage estimators of the mean matrix.
//!
//! Known covariance: `Ξ̂ = Z (I_p + U H(L) U*)` with `Z*Z = U L U*`.
//! Unknown covariance, `m > p`: `Ξ̂ = Z (I_p + A H(F) A⁻¹)` with
//! `A* S A = I`, `A* Z*Z A = F`.
//! Unknown covariance, `p > m`: `Ξ̂ = (I_m + U H(F) U*) Z` with
//! `Z S⁻¹ Z* = U F U*`.

use std::fmt;
use std::sync::Arc;

use serde::de::{self, Deserializer};
use serde::ser::{self, Serializer};
use serde::{Deserialize, Serialize};

use crate::cmatrix::{
    herm_eigen, herm_pd_inverse, inv_sqrt_herm, sim_diag_unchecked, sqrt_herm, CMatrix, HermEigen, SimDiag,
    DEFAULT_GAP_TOL, DEFAULT_TOL, SINGULAR_RATIO,
};
use crate::error::{Error, Result};

/// Vector-valued function of a descending eigenvalue vector.
pub type VecFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Which side of `m = p` a problem lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    MGtP,
    PGtM,
}

impl Branch {
    pub fn of(m: usize, p: usize) -> Result<Branch> {
        match m.cmp(&p) {
            std::cmp::Ordering::Greater => Ok(Branch::MGtP),
            std::cmp::Ordering::Less => Ok(Branch::PGtM),
            std::cmp::Ordering::Equal => Err(Error::BranchMismatch(format!("m = p = {m} has no shrinkage branch"))),
        }
    }

    pub(crate) fn check(self, m: usize, p: usize) -> Result<()> {
        let actual = Branch::of(m, p)?;
        if actual != self {
            return Err(Error::BranchMismatch(format!("{self:?} requested for m = {m}, p = {p}")));
        }
        Ok(())
    }
}

#[derive(Clone)]
pub enum ProfileKind {
    Zero,
    /// `h_k = -c_k / f_k`.
    Coefficients(Vec<f64>),
    /// `h_k = -γ_k(f) / f_k`, audited against `0 ≤ γ_k ≤ bound`,
    /// `∂γ_k/∂f_k ≥ 0` and `γ_1 ≥ … ≥ γ_q` at every evaluation.
    Gamma { gamma: VecFn, gamma_deriv: VecFn, bound: f64 },
    Custom { h: VecFn, h_deriv: VecFn },
}

/// The diagonal map `H(f) = Diag(h_1, …, h_q)` with its diagonal
/// derivatives `h_kk = ∂h_k/∂f_k`.
#[derive(Clone)]
pub struct ShrinkageProfile {
    q: usize,
    kind: ProfileKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileValue {
    pub h: Vec<f64>,
    pub h_deriv: Vec<f64>,
}

impl fmt::Debug for ShrinkageProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.kind {
            ProfileKind::Zero => "Zero".to_string(),
            ProfileKind::Coefficients(c) => format!("Coefficients({c:?})"),
            ProfileKind::Gamma { bound, .. } => format!("Gamma {{ bound: {bound} }}"),
            ProfileKind::Custom { .. } => "Custom".to_string(),
        };
        f.debug_struct("ShrinkageProfile").field("q", &self.q).field("kind", &kind).finish()
    }
}

const AUDIT_FD_STEP: f64 = 1e-6;

impl ShrinkageProfile {
    pub fn zero(q: usize) -> Self {
        ShrinkageProfile { q, kind: ProfileKind::Zero }
    }

    pub fn coefficients(c: Vec<f64>) -> Self {
        ShrinkageProfile { q: c.len(), kind: ProfileKind::Coefficients(c) }
    }

    pub fn gamma(q: usize, gamma: VecFn, gamma_deriv: VecFn, bound: f64) -> Self {
        ShrinkageProfile { q, kind: ProfileKind::Gamma { gamma, gamma_deriv, bound } }
    }

    pub fn custom(q: usize, h: VecFn, h_deriv: VecFn) -> Self {
        ShrinkageProfile { q, kind: ProfileKind::Custom { h, h_deriv } }
    }

    /// Convenience for closures.
    pub fn custom_fn(
        q: usize,
        h: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        h_deriv: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self::custom(q, Arc::new(h), Arc::new(h_deriv))
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn kind(&self) -> &ProfileKind {
        &self.kind
    }

    /// `c_k` for coefficient profiles.
    pub fn coefficient_values(&self) -> Option<&[f64]> {
        match &self.kind {
            ProfileKind::Coefficients(c) => Some(c),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, ProfileKind::Zero)
    }

    pub fn eval(&self, f: &[f64]) -> Result<ProfileValue> {
        if f.len() != self.q {
            return Err(Error::DimensionMismatch(format!(
                "profile of length {} evaluated at {} eigenvalues",
                self.q,
                f.len()
            )));
        }
        let out = match &self.kind {
            ProfileKind::Zero => ProfileValue { h: vec![0.0; self.q], h_deriv: vec![0.0; self.q] },
            ProfileKind::Coefficients(c) => ProfileValue {
                h: c.iter().zip(f).map(|(c, f)| -c / f).collect(),
                h_deriv: c.iter().zip(f).map(|(c, f)| c / (f * f)).collect(),
            },
            ProfileKind::Gamma { gamma, gamma_deriv, bound } => {
                let g = gamma(f);
                let dg = gamma_deriv(f);
                check_len(&g, self.q, "gamma")?;
                check_len(&dg, self.q, "gamma derivative")?;
                audit_gamma(gamma.as_ref(), f, &g, *bound)?;
                ProfileValue {
                    h: g.iter().zip(f).map(|(g, f)| -g / f).collect(),
                    h_deriv: (0..self.q).map(|k| -dg[k] / f[k] + g[k] / (f[k] * f[k])).collect(),
                }
            }
            ProfileKind::Custom { h, h_deriv } => {
                let hv = h(f);
                let dv = h_deriv(f);
                check_len(&hv, self.q, "h")?;
                check_len(&dv, self.q, "h derivative")?;
                ProfileValue { h: hv, h_deriv: dv }
            }
        };
        if out.h.iter().chain(&out.h_deriv).any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteResult("shrinkage profile".into()));
        }
        Ok(out)
    }
}

fn check_len(v: &[f64], q: usize, what: &str) -> Result<()> {
    if v.len() != q {
        return Err(Error::DimensionMismatch(format!("{what} returned {} values, expected {q}", v.len())));
    }
    Ok(())
}

fn audit_gamma(gamma: &(dyn Fn(&[f64]) -> Vec<f64> + Send + Sync), f: &[f64], g: &[f64], bound: f64) -> Result<()> {
    for (k, &gk) in g.iter().enumerate() {
        if !(0.0..=bound).contains(&gk) {
            return Err(Error::ConstraintViolation(format!("gamma_{} = {gk} outside [0, {bound}]", k + 1)));
        }
        if k > 0 && g[k - 1] < gk {
            return Err(Error::ConstraintViolation(format!("gamma_{} < gamma_{}", k, k + 1)));
        }
    }
    let mut probe = f.to_vec();
    for k in 0..f.len() {
        let h = AUDIT_FD_STEP * f[k].abs().max(1.0);
        probe[k] = f[k] + h;
        let up = gamma(&probe);
        probe[k] = f[k] - h;
        let down = gamma(&probe);
        probe[k] = f[k];
        check_len(&up, f.len(), "gamma")?;
        check_len(&down, f.len(), "gamma")?;
        let d = (up[k] - down[k]) / (2.0 * h);
        // FD noise floor for functions of unit scale
        if d < -1e-7 * (1.0 + g[k].abs()) {
            return Err(Error::ConstraintViolation(format!("d gamma_{}/d f_{} = {d:e} < 0", k + 1, k + 1)));
        }
    }
    Ok(())
}

/// A user-supplied `γ` family paired with its diagonal derivative.
#[derive(Clone)]
pub struct GammaSpec {
    pub gamma: VecFn,
    pub gamma_deriv: VecFn,
}

impl fmt::Debug for GammaSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("GammaSpec")
    }
}

#[derive(Debug, Clone)]
pub enum EstimatorKind {
    Mle,
    KnownCrudeEm,
    KnownGamma(GammaSpec),
    KnownOrdered,
    UnknownEm,
    UnknownAs,
    UnknownGamma(GammaSpec),
    CustomH(ShrinkageProfile),
}

/// Names accepted by [`EstimatorKind::from_name`].
pub const BUILTIN_NAMES: [&str; 5] = ["mle", "known_crude_em", "known_ordered", "unknown_em", "unknown_as"];

impl EstimatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::Mle => "mle",
            EstimatorKind::KnownCrudeEm => "known_crude_em",
            EstimatorKind::KnownGamma(_) => "known_gamma",
            EstimatorKind::KnownOrdered => "known_ordered",
            EstimatorKind::UnknownEm => "unknown_em",
            EstimatorKind::UnknownAs => "unknown_as",
            EstimatorKind::UnknownGamma(_) => "unknown_gamma",
            EstimatorKind::CustomH(_) => "custom_h",
        }
    }

    /// Parses a built-in kind with a fixed profile; `None` for other names.
    pub fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "mle" => EstimatorKind::Mle,
            "known_crude_em" => EstimatorKind::KnownCrudeEm,
            "known_ordered" => EstimatorKind::KnownOrdered,
            "unknown_em" => EstimatorKind::UnknownEm,
            "unknown_as" => EstimatorKind::UnknownAs,
            _ => return None,
        })
    }

    fn required_covariance(&self) -> Option<Covariance> {
        match self {
            EstimatorKind::KnownCrudeEm | EstimatorKind::KnownGamma(_) | EstimatorKind::KnownOrdered => {
                Some(Covariance::Known)
            }
            EstimatorKind::UnknownEm | EstimatorKind::UnknownAs | EstimatorKind::UnknownGamma(_) => {
                Some(Covariance::Unknown)
            }
            EstimatorKind::Mle | EstimatorKind::CustomH(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Covariance {
    Known,
    Unknown,
}

#[derive(Debug, Clone)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    pub covariance: Covariance,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecJson {
    kind: String,
    covariance: Covariance,
}

impl Serialize for EstimatorSpec {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        if EstimatorKind::from_name(self.kind.name()).is_none() {
            return Err(ser::Error::custom(format!("{} estimators have no JSON form", self.kind.name())));
        }
        SpecJson { kind: self.kind.name().to_string(), covariance: self.covariance }.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for EstimatorSpec {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let raw = SpecJson::deserialize(deserializer)?;
        let kind = EstimatorKind::from_name(&raw.kind).ok_or_else(|| {
            de::Error::custom(format!(
                "unknown estimator kind `{}` (expected mle, known_crude_em, known_ordered, unknown_em, unknown_as)",
                raw.kind
            ))
        })?;
        let spec = EstimatorSpec { kind, covariance: raw.covariance };
        spec.check_mode().map_err(de::Error::custom)?;
        Ok(spec)
    }
}

impl EstimatorSpec {
    pub fn new(kind: EstimatorKind, covariance: Covariance) -> Result<Self> {
        let spec = EstimatorSpec { kind, covariance };
        spec.check_mode()?;
        Ok(spec)
    }

    /// Known kinds get known covariance, unknown kinds unknown; MLE and custom
    /// profiles default to known.
    pub fn of(kind: EstimatorKind) -> Self {
        let covariance = kind.required_covariance().unwrap_or(Covariance::Known);
        EstimatorSpec { kind, covariance }
    }

    pub fn id(&self) -> &'static str {
        self.kind.name()
    }

    fn check_mode(&self) -> Result<()> {
        match self.kind.required_covariance() {
            Some(req) if req != self.covariance => Err(Error::ConfigInvalid(format!(
                "{} requires {:?} covariance",
                self.kind.name(),
                req
            ))),
            _ => Ok(()),
        }
    }

    /// Dimension compatibility with an `m × p` model.
    pub fn check_dims(&self, m: usize, p: usize) -> Result<()> {
        self.check_mode()?;
        match &self.kind {
            EstimatorKind::Mle => Ok(()),
            EstimatorKind::KnownCrudeEm | EstimatorKind::KnownGamma(_) | EstimatorKind::KnownOrdered => {
                if m > p {
                    Ok(())
                } else {
                    Err(Error::BranchMismatch(format!("{} requires m > p, got m = {m}, p = {p}", self.id())))
                }
            }
            EstimatorKind::CustomH(profile) => {
                let q = match self.covariance {
                    Covariance::Known => {
                        if m < p {
                            return Err(Error::BranchMismatch(format!("known-covariance profile needs m >= p, got m = {m}, p = {p}")));
                        }
                        p
                    }
                    Covariance::Unknown => {
                        Branch::of(m, p)?;
                        m.min(p)
                    }
                };
                if profile.q() != q {
                    return Err(Error::DimensionMismatch(format!("profile length {} for q = {q}", profile.q())));
                }
                Ok(())
            }
            _ => Branch::of(m, p).map(|_| ()),
        }
    }
}

/// `c_k` for the Efron-Morris type unknown-covariance estimator.
pub fn em_coefficient(m: usize, p: usize, n: usize) -> Result<f64> {
    let (m, p, n) = (m as f64, p as f64, n as f64);
    Ok(match Branch::of(m as usize, p as usize)? {
        Branch::MGtP => (m - p) / (n + p),
        Branch::PGtM => (p - m) / (n + 2.0 * m - p),
    })
}

/// `c_k^{(AS)} = (m + p - 2k) / (n - p + 2k)` for `k = 1..=min(m, p)`.
pub fn as_coefficients(m: usize, p: usize, n: usize) -> Vec<f64> {
    (1..=m.min(p))
        .map(|k| {
            let (m, p, n, k) = (m as f64, p as f64, n as f64, k as f64);
            (m + p - 2.0 * k) / (n - p + 2.0 * k)
        })
        .collect()
}

/// `m + p - 2k` for `k = 1..=p`.
pub fn ordered_coefficients(m: usize, p: usize) -> Vec<f64> {
    (1..=p).map(|k| (m + p) as f64 - 2.0 * k as f64).collect()
}

/// Upper bound on `γ_k` for the unknown-covariance γ class.
pub fn unknown_gamma_bound(m: usize, p: usize, n: usize) -> f64 {
    let (m, p, n) = (m as f64, p as f64, n as f64);
    f64::max(2.0 * (m - p) / (n + p), 2.0 * (p - m) / (n + 2.0 * m - p))
}

/// Closed-form profile for a built-in estimator kind.
pub fn make_profile(kind: &EstimatorKind, m: usize, p: usize, n: usize) -> Result<ShrinkageProfile> {
    let known_branch = || -> Result<()> {
        if m > p {
            Ok(())
        } else {
            Err(Error::BranchMismatch(format!("{} requires m > p, got m = {m}, p = {p}", kind.name())))
        }
    };
    match kind {
        EstimatorKind::Mle => Ok(ShrinkageProfile::zero(p.min(m))),
        EstimatorKind::KnownCrudeEm => {
            known_branch()?;
            Ok(ShrinkageProfile::coefficients(vec![(m - p) as f64; p]))
        }
        EstimatorKind::KnownOrdered => {
            known_branch()?;
            Ok(ShrinkageProfile::coefficients(ordered_coefficients(m, p)))
        }
        EstimatorKind::KnownGamma(g) => {
            known_branch()?;
            Ok(ShrinkageProfile::gamma(p, g.gamma.clone(), g.gamma_deriv.clone(), 2.0 * (m - p) as f64))
        }
        EstimatorKind::UnknownEm => {
            let c = em_coefficient(m, p, n)?;
            Ok(ShrinkageProfile::coefficients(vec![c; m.min(p)]))
        }
        EstimatorKind::UnknownAs => {
            Branch::of(m, p)?;
            Ok(ShrinkageProfile::coefficients(as_coefficients(m, p, n)))
        }
        EstimatorKind::UnknownGamma(g) => {
            Branch::of(m, p)?;
            Ok(ShrinkageProfile::gamma(m.min(p), g.gamma.clone(), g.gamma_deriv.clone(), unknown_gamma_bound(m, p, n)))
        }
        EstimatorKind::CustomH(profile) => Ok(profile.clone()),
    }
}

/// Rejects spectra whose smallest eigenvalue is negligible or whose relative
/// gaps fall below `gap_tol`.
pub(crate) fn guard_spectrum(f: &[f64], gap_tol: f64) -> Result<()> {
    let fmax = f[0];
    let fmin = *f.last().unwrap();
    if !(fmin > SINGULAR_RATIO * fmax) {
        return Err(Error::DegenerateSpectrum(format!("smallest eigenvalue {fmin:e} vs largest {fmax:e}")));
    }
    let gap = crate::cmatrix::min_relative_gap(f);
    if gap < gap_tol {
        return Err(Error::DegenerateSpectrum(format!("relative eigengap {gap:e} below {gap_tol:e}")));
    }
    Ok(())
}

/// Eigendecomposition of `Z*Z`, guarded.
pub fn known_decomposition(z: &CMatrix) -> Result<HermEigen> {
    let eig = herm_eigen(&z.gram(), DEFAULT_TOL)?;
    guard_spectrum(&eig.lambda, DEFAULT_GAP_TOL)?;
    Ok(eig)
}

/// Decomposition backing the unknown-covariance estimators.
#[derive(Debug, Clone)]
pub enum UnknownDecomposition {
    /// `A* S A = I`, `A* Z*Z A = F`.
    MGtP(SimDiag),
    /// `Z S⁻¹ Z* = U F U*`.
    PGtM(HermEigen),
}

impl UnknownDecomposition {
    pub fn f(&self) -> &[f64] {
        match self {
            UnknownDecomposition::MGtP(sd) => &sd.f,
            UnknownDecomposition::PGtM(e) => &e.lambda,
        }
    }

    pub fn branch(&self) -> Branch {
        match self {
            UnknownDecomposition::MGtP(_) => Branch::MGtP,
            UnknownDecomposition::PGtM(_) => Branch::PGtM,
        }
    }
}

/// Branch decomposition without spectrum guards.
pub(crate) fn unknown_decomposition_unchecked(z: &CMatrix, s: &CMatrix) -> Result<UnknownDecomposition> {
    let (m, p) = z.shape();
    if s.shape() != (p, p) {
        return Err(Error::DimensionMismatch(format!("s is {:?}, expected {p}x{p}", s.shape())));
    }
    match Branch::of(m, p)? {
        Branch::MGtP => Ok(UnknownDecomposition::MGtP(sim_diag_unchecked(&z.gram(), s)?)),
        Branch::PGtM => {
            let s_inv = herm_pd_inverse(s)?;
            let t = (&(z * &s_inv) * &z.adjoint()).hermitian_part();
            Ok(UnknownDecomposition::PGtM(herm_eigen(&t, DEFAULT_TOL)?))
        }
    }
}

/// Guarded branch decomposition.
pub fn unknown_decomposition(z: &CMatrix, s: &CMatrix) -> Result<UnknownDecomposition> {
    let d = unknown_decomposition_unchecked(z, s)?;
    guard_spectrum(d.f(), DEFAULT_GAP_TOL)?;
    Ok(d)
}

/// `Z (I_p + U H(L) U*)` with `Z*Z = U L U*`.
pub fn apply_h_known(z: &CMatrix, profile: &ShrinkageProfile) -> Result<CMatrix> {
    let (m, p) = z.shape();
    if m < p {
        return Err(Error::BranchMismatch(format!("known-covariance estimator needs m >= p, got m = {m}, p = {p}")));
    }
    if profile.is_zero() {
        return Ok(z.clone());
    }
    let eig = known_decomposition(z)?;
    let h = profile.eval(&eig.lambda)?.h;
    let core = &eig.u.mul_diag_right(&h) * &eig.u.adjoint();
    Ok(z + &(z * &core))
}

/// `Z (I_p + A H(F) A⁻¹)` if `m > p`, `(I_m + U H(F) U*) Z` if `p > m`.
pub fn apply_h_unknown(z: &CMatrix, s: &CMatrix, profile: &ShrinkageProfile) -> Result<CMatrix> {
    let (m, p) = z.shape();
    Branch::of(m, p)?;
    if profile.is_zero() {
        return Ok(z.clone());
    }
    let d = unknown_decomposition(z, s)?;
    let h = profile.eval(d.f())?.h;
    Ok(match d {
        UnknownDecomposition::MGtP(sd) => {
            let core = &sd.a.mul_diag_right(&h) * sd.a_inv();
            z + &(z * &core)
        }
        UnknownDecomposition::PGtM(e) => {
            let core = &e.u.mul_diag_right(&h) * &e.u.adjoint();
            z + &(&core * z)
        }
    })
}

/// `K^{-1/2} Z`.
pub fn whiten(z: &CMatrix, k: &CMatrix) -> Result<CMatrix> {
    z_rows_match(z, k)?;
    Ok(&inv_sqrt_herm(k)? * z)
}

/// `K^{1/2} Ξ̂`.
pub fn unwhiten(xi_hat: &CMatrix, k: &CMatrix) -> Result<CMatrix> {
    z_rows_match(xi_hat, k)?;
    Ok(&sqrt_herm(k)? * xi_hat)
}

fn z_rows_match(z: &CMatrix, k: &CMatrix) -> Result<()> {
    if k.shape() != (z.rows(), z.rows()) {
        return Err(Error::DimensionMismatch(format!("k is {:?} for {} rows", k.shape(), z.rows())));
    }
    Ok(())
}

/// Optional inputs to [`estimate`].
#[derive(Debug, Clone, Copy, Default)]
pub struct EstimateInputs<'a> {
    pub s: Option<&'a CMatrix>,
    pub n: Option<usize>,
    pub sigma: Option<&'a CMatrix>,
    pub k: Option<&'a CMatrix>,
}

/// Dispatches an estimator. Known mode whitens `Z → K^{-1/2} Z Σ^{-1/2}`
/// (missing `Σ` or `K` mean identity) and maps back; unknown mode whitens by
/// `K` only and needs `S` and `n`.
pub fn estimate(spec: &EstimatorSpec, z: &CMatrix, inputs: EstimateInputs<'_>) -> Result<CMatrix> {
    let (m, p) = z.shape();
    spec.check_dims(m, p)?;
    if let EstimatorKind::Mle = spec.kind {
        return Ok(z.clone());
    }
    let zk = match inputs.k {
        Some(k) => whiten(z, k)?,
        None => z.clone(),
    };
    let out = match spec.covariance {
        Covariance::Known => {
            let profile = make_profile(&spec.kind, m, p, inputs.n.unwrap_or(0))?;
            match inputs.sigma {
                Some(sigma) => {
                    if sigma.shape() != (p, p) {
                        return Err(Error::DimensionMismatch(format!("sigma is {:?}, expected {p}x{p}", sigma.shape())));
                    }
                    let w = &zk * &inv_sqrt_herm(sigma)?;
                    &apply_h_known(&w, &profile)? * &sqrt_herm(sigma)?
                }
                None => apply_h_known(&zk, &profile)?,
            }
        }
        Covariance::Unknown => {
            let s = inputs.s.ok_or_else(|| Error::MissingArgument("s is required for unknown covariance".into()))?;
            let n = match (&spec.kind, inputs.n) {
                (EstimatorKind::CustomH(_), n) => n.unwrap_or(0),
                (_, Some(n)) => n,
                (_, None) => {
                    return Err(Error::MissingArgument(format!("n is required for {}", spec.id())));
                }
            };
            let profile = make_profile(&spec.kind, m, p, n)?;
            apply_h_unknown(&zk, s, &profile)?
        }
    };
    match inputs.k {
        Some(k) => unwhiten(&out, k),
        None => Ok(out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::RngStream;
    use num_complex::Complex64 as C64;
    use proptest::prelude::*;

    fn col(v: &[f64]) -> CMatrix {
        CMatrix::from_real(v.len(), 1, v).unwrap()
    }

    fn random_pd(rng: &mut RngStream, p: usize) -> CMatrix {
        let x = rng.complex_normal_matrix(p + 3, p);
        &x.gram() + &CMatrix::identity(p).scale(0.2)
    }

    fn random_unitary(rng: &mut RngStream, p: usize) -> CMatrix {
        herm_eigen(&rng.complex_normal_matrix(p, p).hermitian_part(), DEFAULT_TOL).unwrap().u
    }

    #[test]
    fn zero_profile_is_identity_map() {
        let mut rng = RngStream::new(1, 0);
        let z = rng.complex_normal_matrix(4, 2);
        assert_eq!(apply_h_known(&z, &ShrinkageProfile::zero(2)).unwrap(), z);
        let s = random_pd(&mut rng, 2);
        assert_eq!(apply_h_unknown(&z, &s, &ShrinkageProfile::zero(2)).unwrap(), z);
    }

    #[test]
    fn crude_em_scalar_case() {
        let z = col(&[1.0, 1.0, 1.0]);
        let prof = make_profile(&EstimatorKind::KnownCrudeEm, 3, 1, 0).unwrap();
        let out = apply_h_known(&z, &prof).unwrap();
        assert!(out.max_abs_diff(&z.scale(1.0 / 3.0)) < 1e-15);
    }

    #[test]
    fn known_ordered_scalar_case() {
        let z = col(&[2.0, 0.0, 0.0]);
        let prof = make_profile(&EstimatorKind::KnownOrdered, 3, 1, 0).unwrap();
        assert_eq!(prof.coefficient_values().unwrap(), &[2.0]);
        let out = apply_h_known(&z, &prof).unwrap();
        assert!(out.max_abs_diff(&z.scale(0.5)) < 1e-15);
    }

    #[test]
    fn unknown_as_scalar_is_james_stein() {
        let mut rng = RngStream::new(2, 0);
        let z = rng.complex_normal_matrix(4, 1);
        let s = CMatrix::from_diag(&[2.5]);
        let n = 7;
        let prof = make_profile(&EstimatorKind::UnknownAs, 4, 1, n).unwrap();
        let c1 = 3.0 / 8.0;
        assert!((prof.coefficient_values().unwrap()[0] - c1).abs() < 1e-15);
        let zz = z.norm_sqr();
        let expected = z.scale(1.0 - c1 * 2.5 / zz);
        assert!(apply_h_unknown(&z, &s, &prof).unwrap().max_abs_diff(&expected) < 1e-13);
    }

    #[test]
    fn unknown_em_scalar_factor() {
        let z = col(&[3.0, 1.0, 0.0, 0.0]);
        let s = CMatrix::from_diag(&[5.0]);
        let prof = make_profile(&EstimatorKind::UnknownEm, 4, 1, 6).unwrap();
        let out = apply_h_unknown(&z, &s, &prof).unwrap();
        assert!(out.max_abs_diff(&z.scale(11.0 / 14.0)) < 1e-14);
    }

    #[test]
    fn coefficient_hand_values() {
        assert!((as_coefficients(5, 2, 6)[0] - 5.0 / 6.0).abs() < 1e-15);
        assert!((em_coefficient(6, 3, 8).unwrap() - 3.0 / 11.0).abs() < 1e-15);
        assert_eq!(ordered_coefficients(3, 1), vec![2.0]);
        assert!((em_coefficient(2, 6, 10).unwrap() - 4.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn coefficients_strictly_decreasing() {
        for m in 1..9 {
            for p in 1..9 {
                if m == p {
                    continue;
                }
                let c = as_coefficients(m, p, m.max(p) + 3);
                assert!(c.windows(2).all(|w| w[0] > w[1]));
                let o = ordered_coefficients(m, p);
                assert!(o.windows(2).all(|w| w[0] > w[1]));
            }
        }
    }

    #[test]
    fn square_problems_are_rejected() {
        for kind in [
            EstimatorKind::KnownCrudeEm,
            EstimatorKind::KnownOrdered,
            EstimatorKind::UnknownEm,
            EstimatorKind::UnknownAs,
        ] {
            assert!(matches!(make_profile(&kind, 3, 3, 5), Err(Error::BranchMismatch(_))));
        }
        let z = CMatrix::identity(3);
        let spec = EstimatorSpec::of(EstimatorKind::Mle);
        assert_eq!(estimate(&spec, &z, EstimateInputs::default()).unwrap(), z);
    }

    #[test]
    fn near_singular_gram_is_degenerate() {
        let z = CMatrix::from_real(3, 2, &[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let prof = make_profile(&EstimatorKind::KnownCrudeEm, 3, 2, 0).unwrap();
        assert!(matches!(apply_h_known(&z, &prof), Err(Error::DegenerateSpectrum(_))));
    }

    #[test]
    fn whitening_round_trip() {
        let z = CMatrix::from_real(1, 2, &[2.0, -4.0]).unwrap();
        let k = CMatrix::from_diag(&[4.0]);
        let w = whiten(&z, &k).unwrap();
        assert_eq!(w, z.scale(0.5));
        assert_eq!(unwhiten(&w, &k).unwrap(), z);
        let mut rng = RngStream::new(3, 0);
        let k = random_pd(&mut rng, 4);
        let z = rng.complex_normal_matrix(4, 3);
        let back = unwhiten(&whiten(&z, &k).unwrap(), &k).unwrap();
        assert!(back.max_abs_diff(&z) < 1e-10);
        assert_eq!(whiten(&z, &CMatrix::identity(4)).unwrap(), z);
    }

    #[test]
    fn known_crude_em_with_sigma_matches_direct_formula() {
        let mut rng = RngStream::new(4, 0);
        let z = rng.complex_normal_matrix(5, 2);
        let sigma = random_pd(&mut rng, 2);
        let spec = EstimatorSpec::of(EstimatorKind::KnownCrudeEm);
        let out = estimate(&spec, &z, EstimateInputs { sigma: Some(&sigma), ..Default::default() }).unwrap();
        let direct = &z - &(&z * &(&z.gram().inverse().unwrap() * &sigma)).scale(3.0);
        assert!(out.max_abs_diff(&direct) < 1e-10);
    }

    #[test]
    fn unknown_em_direct_formulas() {
        let mut rng = RngStream::new(5, 0);
        let spec = EstimatorSpec::of(EstimatorKind::UnknownEm);
        // p > m
        let z = rng.complex_normal_matrix(2, 5);
        let s = random_pd(&mut rng, 5);
        let n = 9;
        let out = estimate(&spec, &z, EstimateInputs { s: Some(&s), n: Some(n), ..Default::default() }).unwrap();
        let t = &(&z * &s.inverse().unwrap()) * &z.adjoint();
        let c = 3.0 / (9.0 + 4.0 - 5.0);
        let direct = &z - &(&t.inverse().unwrap() * &z).scale(c);
        assert!(out.max_abs_diff(&direct) < 1e-10);
        // m > p
        let z = rng.complex_normal_matrix(5, 2);
        let s = random_pd(&mut rng, 2);
        let out = estimate(&spec, &z, EstimateInputs { s: Some(&s), n: Some(n), ..Default::default() }).unwrap();
        let c = 3.0 / (9.0 + 2.0);
        let direct = &z - &(&z * &(&z.gram().inverse().unwrap() * &s)).scale(c);
        assert!(out.max_abs_diff(&direct) < 1e-10);
    }

    #[test]
    fn missing_arguments() {
        let z = CMatrix::from_real(3, 1, &[1.0, 2.0, 3.0]).unwrap();
        let spec = EstimatorSpec::of(EstimatorKind::UnknownEm);
        assert!(matches!(estimate(&spec, &z, EstimateInputs::default()), Err(Error::MissingArgument(_))));
        let s = CMatrix::identity(1);
        let r = estimate(&spec, &z, EstimateInputs { s: Some(&s), ..Default::default() });
        assert!(matches!(r, Err(Error::MissingArgument(_))));
    }

    #[test]
    fn mode_mismatch_is_rejected() {
        assert!(EstimatorSpec::new(EstimatorKind::UnknownAs, Covariance::Known).is_err());
        assert!(EstimatorSpec::new(EstimatorKind::KnownOrdered, Covariance::Unknown).is_err());
        assert!(EstimatorSpec::new(EstimatorKind::Mle, Covariance::Unknown).is_ok());
        assert!(EstimatorSpec::of(EstimatorKind::KnownOrdered).check_dims(2, 5).is_err());
        assert!(EstimatorSpec::of(EstimatorKind::UnknownAs).check_dims(2, 5).is_ok());
    }

    #[test]
    fn spec_json() {
        let spec: EstimatorSpec = serde_json::from_str(r#"{"kind":"unknown_as","covariance":"unknown"}"#).unwrap();
        assert_eq!(spec.id(), "unknown_as");
        assert_eq!(serde_json::to_string(&spec).unwrap(), r#"{"kind":"unknown_as","covariance":"unknown"}"#);
        assert!(serde_json::from_str::<EstimatorSpec>(r#"{"kind":"ficyreg","covariance":"unknown"}"#).is_err());
        assert!(serde_json::from_str::<EstimatorSpec>(r#"{"kind":"unknown_as","covariance":"known"}"#).is_err());
        let custom = EstimatorSpec::of(EstimatorKind::CustomH(ShrinkageProfile::zero(1)));
        assert!(serde_json::to_string(&custom).is_err());
    }

    fn increasing_gamma(c: Vec<f64>, d: f64) -> GammaSpec {
        let c2 = c.clone();
        GammaSpec {
            gamma: Arc::new(move |f: &[f64]| f.iter().zip(&c).map(|(f, c)| c * f / (f + d)).collect()),
            gamma_deriv: Arc::new(move |f: &[f64]| f.iter().zip(&c2).map(|(f, c)| c * d / ((f + d) * (f + d))).collect()),
        }
    }

    #[test]
    fn gamma_profile_audit() {
        let ok = make_profile(&EstimatorKind::KnownGamma(increasing_gamma(vec![3.0, 1.0], 1.0)), 4, 2, 0).unwrap();
        assert!(ok.eval(&[5.0, 2.0]).is_ok());
        let too_big = make_profile(&EstimatorKind::KnownGamma(increasing_gamma(vec![5.0, 1.0], 0.0)), 4, 2, 0).unwrap();
        assert!(matches!(too_big.eval(&[5.0, 2.0]), Err(Error::ConstraintViolation(_))));
        let unordered = make_profile(&EstimatorKind::KnownGamma(increasing_gamma(vec![1.0, 3.0], 0.0)), 4, 2, 0).unwrap();
        assert!(matches!(unordered.eval(&[5.0, 2.0]), Err(Error::ConstraintViolation(_))));
        let decreasing = GammaSpec {
            gamma: Arc::new(|f: &[f64]| f.iter().map(|f| 1.0 / (1.0 + f)).collect()),
            gamma_deriv: Arc::new(|f: &[f64]| f.iter().map(|f| -1.0 / ((1.0 + f) * (1.0 + f))).collect()),
        };
        let bad = make_profile(&EstimatorKind::KnownGamma(decreasing), 4, 2, 0).unwrap();
        assert!(matches!(bad.eval(&[5.0, 2.0]), Err(Error::ConstraintViolation(_))));
    }

    fn fd_check(profile: &ShrinkageProfile, f: &[f64]) {
        let v = profile.eval(f).unwrap();
        for k in 0..f.len() {
            let h = 1e-6 * f[k];
            let mut up = f.to_vec();
            up[k] += h;
            let mut dn = f.to_vec();
            dn[k] -= h;
            let d = (profile.eval(&up).unwrap().h[k] - profile.eval(&dn).unwrap().h[k]) / (2.0 * h);
            assert!((d - v.h_deriv[k]).abs() <= 1e-6 * (1.0 + d.abs()), "k={k} fd={d} analytic={}", v.h_deriv[k]);
        }
    }

    proptest! {
        #[test]
        fn profile_derivatives_match_fd(
            raw in prop::collection::vec(0.5f64..50.0, 3),
            d in 0.1f64..5.0,
        ) {
            let mut f = raw.clone();
            f.sort_by(|a, b| b.partial_cmp(a).unwrap());
            prop_assume!(f[0] - f[1] > 1e-3 && f[1] - f[2] > 1e-3);
            fd_check(&make_profile(&EstimatorKind::UnknownAs, 7, 3, 9).unwrap(), &f);
            fd_check(&make_profile(&EstimatorKind::KnownOrdered, 7, 3, 0).unwrap(), &f);
            fd_check(&make_profile(&EstimatorKind::KnownGamma(increasing_gamma(vec![6.0, 4.0, 1.0], d)), 7, 3, 0).unwrap(), &f);
        }

        #[test]
        fn unitary_equivariance(seed in 0u64..10_000) {
            let mut rng = RngStream::new(seed, 1);
            let z = rng.complex_normal_matrix(5, 3);
            let s = random_pd(&mut rng, 3);
            let q = random_unitary(&mut rng, 3);
            for kind in [EstimatorKind::UnknownEm, EstimatorKind::UnknownAs] {
                let spec = EstimatorSpec::of(kind);
                let a = estimate(&spec, &z, EstimateInputs { s: Some(&s), n: Some(8), ..Default::default() });
                let zq = &z * &q;
                let sq = &(&q.adjoint() * &s) * &q;
                let b = estimate(&spec, &zq, EstimateInputs { s: Some(&sq), n: Some(8), ..Default::default() });
                if let (Ok(a), Ok(b)) = (a, b) {
                    prop_assert!((&a * &q).max_abs_diff(&b) < 1e-9 * (1.0 + z.max_abs()));
                }
            }
        }

        #[test]
        fn shrinkage_reduces_norm(seed in 0u64..10_000) {
            let mut rng = RngStream::new(seed, 2);
            let z = rng.complex_normal_matrix(6, 2).scale(3.0);
            let s = random_pd(&mut rng, 2);
            for kind in [EstimatorKind::UnknownEm, EstimatorKind::UnknownAs] {
                let prof = make_profile(&kind, 6, 2, 10).unwrap();
                let d = unknown_decomposition(&z, &s).unwrap();
                let c = prof.coefficient_values().unwrap();
                prop_assume!(d.f().iter().zip(c).all(|(f, c)| f >= c));
                let v = prof.eval(d.f()).unwrap();
                prop_assert!(v.h.iter().all(|&h| h <= 0.0));
                let out = apply_h_unknown(&z, &s, &prof).unwrap();
                prop_assert!(out.norm_sqr() <= z.norm_sqr() * (1.0 + 1e-12));
            }
            for kind in [EstimatorKind::KnownCrudeEm, EstimatorKind::KnownOrdered] {
                let prof = make_profile(&kind, 6, 2, 0).unwrap();
                let l = known_decomposition(&z).unwrap().lambda;
                prop_assume!(l.iter().zip(prof.coefficient_values().unwrap()).all(|(l, c)| l >= c));
                let out = apply_h_known(&z, &prof).unwrap();
                prop_assert!(out.norm_sqr() <= z.norm_sqr() * (1.0 + 1e-12));
            }
        }
    }

    #[test]
    fn complex_input_known_path() {
        let z = CMatrix::from_vec(3, 1, vec![C64::new(1.0, 1.0), C64::new(0.0, -1.0), C64::new(0.0, 0.0)]).unwrap();
        let prof = make_profile(&EstimatorKind::KnownCrudeEm, 3, 1, 0).unwrap();
        let out = apply_h_known(&z, &prof).unwrap();
        assert!(out.max_abs_diff(&z.scale(1.0 - 2.0 / 3.0)) < 1e-15);
    }
}
