//! Losses, unbiased risk estimates, and Monte Carlo checks of the Stein and
//! Stein-Haff identities.

use num_complex::Complex64 as C64;

use crate::calculus::{fd_divergence, fd_hermitian_trace, DEFAULT_FD_STEP};
use crate::cmatrix::{herm_eigen, herm_pd_inverse, min_relative_gap, sqrt_herm, CMatrix, DEFAULT_TOL};
use crate::error::{Error, Result};
use crate::estimators::{unknown_decomposition_unchecked, Branch, ShrinkageProfile};
use crate::sampling::RngStream;
use crate::stats::{paired_difference, MeanSe};

/// Squared Frobenius distance `Tr{(Ξ̂ − Ξ)*(Ξ̂ − Ξ)}`.
pub fn loss_known(xi_hat: &CMatrix, xi: &CMatrix) -> Result<f64> {
    if xi_hat.shape() != xi.shape() {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", xi_hat.shape(), xi.shape())));
    }
    Ok((xi_hat - xi).norm_sqr())
}

/// `Tr{Σ⁻¹ (Ξ̂ − Ξ)* K⁻¹ (Ξ̂ − Ξ)}`.
pub fn loss_invariant(xi_hat: &CMatrix, xi: &CMatrix, sigma: &CMatrix, k: &CMatrix) -> Result<f64> {
    let (m, p) = xi.shape();
    if xi_hat.shape() != (m, p) || sigma.shape() != (p, p) || k.shape() != (m, m) {
        return Err(Error::DimensionMismatch(format!(
            "xi_hat {:?}, xi {:?}, sigma {:?}, k {:?}",
            xi_hat.shape(),
            xi.shape(),
            sigma.shape(),
            k.shape()
        )));
    }
    let d = xi_hat - xi;
    let inner = &(&d.adjoint() * &herm_pd_inverse(k)?) * &d;
    Ok((&herm_pd_inverse(sigma)? * &inner).trace().re.max(0.0))
}

/// A risk estimate evaluated at one data point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UreValue {
    pub value: f64,
    /// `value − m·p`.
    pub delta: f64,
    /// Smallest consecutive relative eigengap; `+inf` with one eigenvalue.
    pub min_gap: f64,
    /// Set when `min_gap` is below the caller's threshold. The value is still
    /// reported but should not be aggregated.
    pub degenerate_flag: bool,
}

impl UreValue {
    fn new(m: usize, p: usize, delta: f64, min_gap: f64, gap_threshold: f64) -> Self {
        let mp = (m * p) as f64;
        UreValue { value: mp + delta, delta, min_gap, degenerate_flag: !(min_gap >= gap_threshold) }
    }
}

fn gap_sum(f: &[f64], x: &[f64], k: usize) -> f64 {
    ((k + 1)..f.len()).map(|b| (x[k] - x[b]) / (f[k] - f[b])).sum()
}

/// Known-covariance increment at eigenvalues `l` of `Z*Z`:
/// `Σ_k {2(m−p+1)h_k + 2ℓ_k h_kk + 4Σ_{b>k}(ℓ_k h_k − ℓ_b h_b)/(ℓ_k − ℓ_b) + ℓ_k h_k²}`.
pub fn known_increment(m: usize, p: usize, l: &[f64], profile: &ShrinkageProfile) -> Result<f64> {
    if l.len() != p {
        return Err(Error::DimensionMismatch(format!("{} eigenvalues for p = {p}", l.len())));
    }
    let v = profile.eval(l)?;
    let (h, hd) = (&v.h, &v.h_deriv);
    let lh: Vec<f64> = l.iter().zip(h).map(|(a, b)| a * b).collect();
    let c = 2.0 * (m as f64 - p as f64 + 1.0);
    Ok((0..p).map(|k| c * h[k] + 2.0 * l[k] * hd[k] + 4.0 * gap_sum(l, &lh, k) + l[k] * h[k] * h[k]).sum())
}

/// Unbiased estimate of `E‖Ξ̂_H − Ξ‖²` for `Z ~ CN(Ξ, I⊗I)`, `m ≥ p`.
/// Degenerate spectra are flagged, not rejected.
pub fn ure_known(z: &CMatrix, profile: &ShrinkageProfile, gap_threshold: f64) -> Result<UreValue> {
    let (m, p) = z.shape();
    if m < p {
        return Err(Error::BranchMismatch(format!("known-covariance estimate needs m >= p, got m = {m}, p = {p}")));
    }
    let eig = herm_eigen(&z.gram(), DEFAULT_TOL)?;
    let gap = min_relative_gap(&eig.lambda);
    let delta = flagged(known_increment(m, p, &eig.lambda, profile), gap, gap_threshold)?;
    Ok(UreValue::new(m, p, delta, gap, gap_threshold))
}

/// Non-finite profile values at a flagged point become NaN instead of errors.
fn flagged(r: Result<f64>, gap: f64, gap_threshold: f64) -> Result<f64> {
    match r {
        Err(Error::NonFiniteResult(_)) if !(gap >= gap_threshold) => Ok(f64::NAN),
        other => other,
    }
}

fn delta_hat_raw(n: usize, m: usize, p: usize, f: &[f64], profile: &ShrinkageProfile) -> Result<f64> {
    if f.len() != p {
        return Err(Error::DimensionMismatch(format!("{} eigenvalues for p = {p}", f.len())));
    }
    let v = profile.eval(f)?;
    let (h, hd) = (&v.h, &v.h_deriv);
    let fh: Vec<f64> = f.iter().zip(h).map(|(a, b)| a * b).collect();
    let fh2: Vec<f64> = fh.iter().map(|x| x * x).collect();
    let c = 2.0 * (m as f64 - p as f64 + 1.0);
    let q = n as f64 + p as f64 - 2.0;
    Ok((0..p)
        .map(|k| {
            c * h[k] + 2.0 * f[k] * hd[k] + 4.0 * gap_sum(f, &fh, k) + q * f[k] * h[k] * h[k]
                - 2.0 * f[k] * f[k] * hd[k] * h[k]
                - 2.0 * gap_sum(f, &fh2, k)
        })
        .sum())
}

/// The unknown-covariance increment `Δ̂(n, m, p; H)` at descending `f`:
///
/// `Σ_k {2(m−p+1)h_k + 2f_k h_kk + 4Σ_{b>k}(f_k h_k − f_b h_b)/(f_k − f_b)
///  + (n+p−2) f_k h_k² − 2 f_k² h_kk h_k − 2Σ_{b>k}(f_k² h_k² − f_b² h_b²)/(f_k − f_b)}`.
pub fn delta_hat(n: usize, m: usize, p: usize, f: &[f64], profile: &ShrinkageProfile) -> Result<f64> {
    let gap = min_relative_gap(f);
    if !(gap >= crate::cmatrix::DEFAULT_GAP_TOL) {
        return Err(Error::DegenerateSpectrum(format!("relative eigengap {gap:e}")));
    }
    if f.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::DegenerateSpectrum("non-positive eigenvalue".into()));
    }
    delta_hat_raw(n, m, p, f, profile)
}

/// `(n, m, p)` arguments of `Δ̂` for an `m × p` problem: unchanged for
/// `m > p`, `(n + m − p, p, m)` for `p > m`.
pub fn delta_hat_arguments(n: usize, m: usize, p: usize) -> Result<(usize, usize, usize)> {
    Ok(match Branch::of(m, p)? {
        Branch::MGtP => (n, m, p),
        Branch::PGtM => (n + m - p, p, m),
    })
}

/// Unbiased estimate of the invariant-loss risk for `Z ~ CN(Ξ, I⊗Σ)`,
/// `S ~ CW_p(Σ, n)`: `m·p + Δ̂` with the branch-appropriate arguments.
pub fn ure_unknown(z: &CMatrix, s: &CMatrix, n: usize, profile: &ShrinkageProfile, gap_threshold: f64) -> Result<UreValue> {
    let (m, p) = z.shape();
    let (nn, mm, pp) = delta_hat_arguments(n, m, p)?;
    if n <= p {
        return Err(Error::DegenerateSample(format!("n = {n} must exceed p = {p}")));
    }
    let d = unknown_decomposition_unchecked(z, s)?;
    let f = d.f();
    let gap = min_relative_gap(f);
    let delta = flagged(delta_hat_raw(nn, mm, pp, f, profile), gap, gap_threshold)?;
    Ok(UreValue::new(m, p, delta, gap, gap_threshold))
}

/// Reference risk estimate for `Ξ̂ = Z + G(Z, S)` with both divergence
/// terms from finite differences:
/// `m·p + 2 Tr Re(∇_Z' G) + Tr D_S(G* G) + (n − p) Tr(G* G S⁻¹)`.
pub fn ure_general(
    z: &CMatrix,
    s: &CMatrix,
    n: usize,
    g: impl Fn(&CMatrix, &CMatrix) -> Result<CMatrix>,
    step: f64,
) -> Result<f64> {
    let (m, p) = z.shape();
    if s.shape() != (p, p) {
        return Err(Error::DimensionMismatch(format!("s is {:?}, expected {p}x{p}", s.shape())));
    }
    let s_inv = herm_pd_inverse(s)?;
    let div_z = fd_divergence(|zp| g(zp, s), z, step)?.re;
    let div_s = fd_hermitian_trace(
        |sp| {
            let gv = g(z, sp)?;
            Ok(gv.gram())
        },
        s,
        step,
    )?
    .re;
    let g0 = g(z, s)?;
    let quad = (&g0.gram() * &s_inv).trace().re;
    let out = (m * p) as f64 + 2.0 * div_z + div_s + (n as f64 - p as f64) * quad;
    if !out.is_finite() {
        return Err(Error::NonFiniteResult("general risk estimate".into()));
    }
    Ok(out)
}

/// Two-sided Monte Carlo estimate of an identity `E[lhs] = E[rhs]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityCheck {
    pub lhs: f64,
    pub rhs: f64,
    /// Standard error of the paired per-replicate difference.
    pub se: f64,
}

impl IdentityCheck {
    fn from_samples(lhs: &[f64], rhs: &[f64]) -> Result<Self> {
        let l = MeanSe::from_samples(lhs).mean;
        let r = MeanSe::from_samples(rhs).mean;
        let d = paired_difference(lhs, rhs);
        if !(l.is_finite() && r.is_finite()) {
            return Err(Error::NonFiniteResult("identity check".into()));
        }
        Ok(IdentityCheck { lhs: l, rhs: r, se: d.se })
    }

    /// `|lhs − rhs| ≤ k·se`.
    pub fn closes(&self, k: f64) -> bool {
        (self.lhs - self.rhs).abs() <= k * self.se
    }
}

/// A vector field `g: C^p → C^p` together with its real divergence
/// `Σ_i (∂Re g_i/∂Re z_i + ∂Im g_i/∂Im z_i)`.
pub trait VectorField: Sync {
    fn value(&self, z: &[C64]) -> Vec<C64>;

    /// Central finite differences unless overridden.
    fn divergence(&self, z: &[C64]) -> f64 {
        let mut acc = 0.0;
        let mut probe = z.to_vec();
        for i in 0..z.len() {
            let hr = DEFAULT_FD_STEP * z[i].re.abs().max(1.0);
            probe[i] = z[i] + hr;
            let up = self.value(&probe)[i].re;
            probe[i] = z[i] - hr;
            let dn = self.value(&probe)[i].re;
            acc += (up - dn) / (2.0 * hr);
            let hi = DEFAULT_FD_STEP * z[i].im.abs().max(1.0);
            probe[i] = z[i] + C64::new(0.0, hi);
            let up = self.value(&probe)[i].im;
            probe[i] = z[i] - C64::new(0.0, hi);
            let dn = self.value(&probe)[i].im;
            acc += (up - dn) / (2.0 * hi);
            probe[i] = z[i];
        }
        acc
    }
}

/// `g(z) = z`.
pub struct IdentityField;

impl VectorField for IdentityField {
    fn value(&self, z: &[C64]) -> Vec<C64> {
        z.to_vec()
    }

    fn divergence(&self, z: &[C64]) -> f64 {
        2.0 * z.len() as f64
    }
}

/// `g(z) = c`.
pub struct ConstantField(pub Vec<C64>);

impl VectorField for ConstantField {
    fn value(&self, _z: &[C64]) -> Vec<C64> {
        self.0.clone()
    }

    fn divergence(&self, _z: &[C64]) -> f64 {
        0.0
    }
}

/// `g(z) = M z`.
pub struct LinearField(pub CMatrix);

impl VectorField for LinearField {
    fn value(&self, z: &[C64]) -> Vec<C64> {
        (0..self.0.rows()).map(|i| (0..self.0.cols()).map(|j| self.0[(i, j)] * z[j]).sum()).collect()
    }

    fn divergence(&self, _z: &[C64]) -> f64 {
        2.0 * self.0.trace().re
    }
}

/// Monte Carlo check of `E[(Z−θ)*Σ⁻¹g + g*Σ⁻¹(Z−θ)] = E[div g]` for
/// `Z ~ CN_p(θ, Σ)`.
pub fn stein_identity_check(
    theta: &[C64],
    sigma: &CMatrix,
    g: &dyn VectorField,
    reps: usize,
    rng: &mut RngStream,
) -> Result<IdentityCheck> {
    let p = theta.len();
    if sigma.shape() != (p, p) {
        return Err(Error::DimensionMismatch(format!("sigma is {:?} for p = {p}", sigma.shape())));
    }
    let root = sqrt_herm(sigma)?;
    let sigma_inv = herm_pd_inverse(sigma)?;
    let mut lhs = Vec::with_capacity(reps);
    let mut rhs = Vec::with_capacity(reps);
    for _ in 0..reps {
        let e: Vec<C64> = (0..p).map(|_| rng.complex_normal()).collect();
        let x: Vec<C64> = (0..p).map(|i| (0..p).map(|j| root[(i, j)] * e[j]).sum()).collect();
        let z: Vec<C64> = x.iter().zip(theta).map(|(a, b)| a + b).collect();
        let gv = g.value(&z);
        let sg: Vec<C64> = (0..p).map(|i| (0..p).map(|j| sigma_inv[(i, j)] * gv[j]).sum()).collect();
        let q: C64 = x.iter().zip(&sg).map(|(a, b)| a.conj() * b).sum();
        lhs.push(2.0 * q.re);
        rhs.push(g.divergence(&z));
    }
    IdentityCheck::from_samples(&lhs, &rhs)
}

/// A matrix field `G(S)` on Hermitian positive-definite matrices together
/// with `Tr(D_S G)`.
pub trait MatrixField: Sync {
    fn value(&self, s: &CMatrix) -> CMatrix;

    /// Hermitian finite differences unless overridden.
    fn ds_trace(&self, s: &CMatrix) -> Result<f64> {
        Ok(fd_hermitian_trace(|sp| Ok(self.value(sp)), s, DEFAULT_FD_STEP)?.re)
    }
}

/// `G(S) = c·S`; `Tr D_S G = c·p²`.
pub struct ScaledSField(pub f64);

impl MatrixField for ScaledSField {
    fn value(&self, s: &CMatrix) -> CMatrix {
        s.scale(self.0)
    }

    fn ds_trace(&self, s: &CMatrix) -> Result<f64> {
        Ok(self.0 * (s.rows() * s.rows()) as f64)
    }
}

/// `G(S) = I`.
pub struct IdentityMatrixField;

impl MatrixField for IdentityMatrixField {
    fn value(&self, s: &CMatrix) -> CMatrix {
        CMatrix::identity(s.rows())
    }

    fn ds_trace(&self, _s: &CMatrix) -> Result<f64> {
        Ok(0.0)
    }
}

/// Monte Carlo check of `E[Tr(G Σ⁻¹)] = E[(n − p) Tr(G S⁻¹) + Tr(D_S G)]`
/// for `S ~ CW_p(Σ, n)`.
pub fn stein_haff_check(
    sigma: &CMatrix,
    n: usize,
    g: &dyn MatrixField,
    reps: usize,
    rng: &mut RngStream,
) -> Result<IdentityCheck> {
    let p = sigma.rows();
    let sigma_inv = herm_pd_inverse(sigma)?;
    let mut lhs = Vec::with_capacity(reps);
    let mut rhs = Vec::with_capacity(reps);
    for _ in 0..reps {
        let s = crate::sampling::sample_cwishart(sigma, n, rng)?;
        let gv = g.value(&s);
        lhs.push((&gv * &sigma_inv).trace().re);
        let s_inv = herm_pd_inverse(&s)?;
        rhs.push((n as f64 - p as f64) * (&gv * &s_inv).trace().re + g.ds_trace(&s)?);
    }
    IdentityCheck::from_samples(&lhs, &rhs)
}
