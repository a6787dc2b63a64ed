//! Eigenvalue calculus for complex matrices.
//!
//! Three decompositions carry the estimators:
//!
//! * `W = Z*Z = U L U*` (known covariance),
//! * `A* S A = I`, `A* Z*Z A = F` (unknown covariance, `m > p`),
//! * `T = Z S⁻¹ Z* = U F U*` (unknown covariance, `p > m`).
//!
//! For each, this module gives the closed-form derivatives of the
//! decomposition components with respect to `Z` (Wirtinger,
//! `∂/∂z = (∂/∂Re − i ∂/∂Im) / 2`) and `S` (the Hermitian operator
//! `∂/∂s_jk = (1 + δ_jk)/2 · (∂/∂Re s_jk + (1 − δ_jk) i ∂/∂Im s_jk)`), the
//! closed-form divergences used by the risk estimates, and central
//! finite-difference oracles for all of them.
//!
//! Tensor index order follows the derivative being taken: `du[i, l, j, k]`
//! is `∂u_il/∂z_jk`, `df_ds[i, k, k']` is `∂f_i/∂s_kk'`, and so on.
//!
//! Divergences are taken in the Wirtinger sense, `Σ_jk Re ∂g_jk/∂z_jk`,
//! which is half the divergence over the real and imaginary coordinates.

use num_complex::Complex64 as C64;

use crate::cmatrix::{herm_eigen, herm_pd_inverse, min_relative_gap, sim_diag, CMatrix, HermEigen, SimDiag, DEFAULT_GAP_TOL, DEFAULT_TOL};
use crate::error::{Error, Result};
use crate::estimators::{unknown_decomposition_unchecked, Branch, ShrinkageProfile, UnknownDecomposition};

pub const DEFAULT_FD_STEP: f64 = 1e-6;
pub const FD_REL_TOL: f64 = 1e-5;
pub const FD_ABS_TOL: f64 = 1e-8;
/// Minimum relative eigengap for instances used in FD comparisons.
pub const FD_GAP_GUARD: f64 = 1e-4;

const ZERO: C64 = C64::new(0.0, 0.0);
const I: C64 = C64::new(0.0, 1.0);

/// Dense complex tensor, row-major over `dims`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<C64>,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        Tensor { dims: dims.to_vec(), data: vec![ZERO; dims.iter().product()] }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dims.len());
        idx.iter().zip(&self.dims).fold(0, |acc, (&i, &d)| {
            debug_assert!(i < d);
            acc * d + i
        })
    }

    pub fn get(&self, idx: &[usize]) -> C64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: C64) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    pub fn conj(&self) -> Tensor {
        Tensor { dims: self.dims.clone(), data: self.data.iter().map(|z| z.conj()).collect() }
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor { dims: self.dims.clone(), data: self.data.iter().map(|z| z * c).collect() }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Entrywise comparison against a reference.
    pub fn compare(&self, reference: &Tensor, rel: f64, abs: f64) -> Comparison {
        assert_eq!(self.dims, reference.dims, "tensor shapes differ");
        let mut cmp = Comparison::empty(rel);
        for (a, b) in self.data.iter().zip(&reference.data) {
            cmp.push(*a, *b, rel, abs);
        }
        cmp
    }
}

/// Outcome of comparing values against a reference under
/// `|a − b| ≤ rel·|b| + abs`.
///
/// `max_rel_error` is `max |a − b| / (|b| + abs/rel)`, so the check passes
/// iff it does not exceed `threshold = rel`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    pub max_rel_error: f64,
    pub max_abs_diff: f64,
    pub threshold: f64,
    pub count: usize,
    pub pass: bool,
}

impl Comparison {
    pub fn empty(rel: f64) -> Self {
        Comparison { max_rel_error: 0.0, max_abs_diff: 0.0, threshold: rel, count: 0, pass: true }
    }

    pub fn push(&mut self, a: C64, b: C64, rel: f64, abs: f64) {
        let diff = (a - b).norm();
        let err = diff / (b.norm() + abs / rel);
        self.count += 1;
        if !(diff <= rel * b.norm() + abs) {
            self.pass = false;
        }
        if err.is_nan() {
            self.max_rel_error = f64::NAN;
        } else if !self.max_rel_error.is_nan() {
            self.max_rel_error = self.max_rel_error.max(err);
        }
        self.max_abs_diff = self.max_abs_diff.max(diff);
    }

    pub fn scalar(a: f64, b: f64, rel: f64, abs: f64) -> Self {
        let mut c = Comparison::empty(rel);
        c.push(C64::new(a, 0.0), C64::new(b, 0.0), rel, abs);
        c
    }

    pub fn merge(self, other: Comparison) -> Comparison {
        let max_rel_error = if self.max_rel_error.is_nan() || other.max_rel_error.is_nan() {
            f64::NAN
        } else {
            self.max_rel_error.max(other.max_rel_error)
        };
        Comparison {
            max_rel_error,
            max_abs_diff: self.max_abs_diff.max(other.max_abs_diff),
            threshold: self.threshold.max(other.threshold),
            count: self.count + other.count,
            pass: self.pass && other.pass,
        }
    }
}

// ---------------------------------------------------------------------------
// Finite-difference probes

fn check_finite(v: &[C64]) -> Result<()> {
    if v.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteResult("finite-difference probe".into()))
    }
}

fn central(f: &impl Fn(&CMatrix) -> Result<Vec<C64>>, plus: &CMatrix, minus: &CMatrix, h: f64) -> Result<Vec<C64>> {
    let a = f(plus)?;
    let b = f(minus)?;
    check_finite(&a)?;
    check_finite(&b)?;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y) / (2.0 * h)).collect())
}

/// Directional derivatives of a vector-valued `f` along `Re z_jk` and `Im z_jk`.
fn probe_entry(
    z: &CMatrix,
    j: usize,
    k: usize,
    step: f64,
    f: &impl Fn(&CMatrix) -> Result<Vec<C64>>,
) -> Result<(Vec<C64>, Vec<C64>)> {
    let x = z[(j, k)];
    let hr = step * x.re.abs().max(1.0);
    let hi = step * x.im.abs().max(1.0);
    let mut plus = z.clone();
    let mut minus = z.clone();
    plus[(j, k)] = x + hr;
    minus[(j, k)] = x - hr;
    let d_re = central(f, &plus, &minus, hr)?;
    plus[(j, k)] = x + I * hi;
    minus[(j, k)] = x - I * hi;
    let d_im = central(f, &plus, &minus, hi)?;
    Ok((d_re, d_im))
}

/// Directional derivatives along Hermitian perturbations of slot `(j, k)`:
/// `Re s_jk` moved symmetrically, `Im s_jk` antisymmetrically. The second
/// component is `None` on the diagonal.
fn probe_hermitian(
    s: &CMatrix,
    j: usize,
    k: usize,
    step: f64,
    f: &impl Fn(&CMatrix) -> Result<Vec<C64>>,
) -> Result<(Vec<C64>, Option<Vec<C64>>)> {
    let x = s[(j, k)];
    let hr = step * x.re.abs().max(1.0);
    let mut plus = s.clone();
    let mut minus = s.clone();
    if j == k {
        plus[(j, j)] = x + hr;
        minus[(j, j)] = x - hr;
        return Ok((central(f, &plus, &minus, hr)?, None));
    }
    let hi = step * x.im.abs().max(1.0);
    plus[(j, k)] = x + hr;
    plus[(k, j)] = (x + hr).conj();
    minus[(j, k)] = x - hr;
    minus[(k, j)] = (x - hr).conj();
    let d_re = central(f, &plus, &minus, hr)?;
    plus[(j, k)] = x + I * hi;
    plus[(k, j)] = (x + I * hi).conj();
    minus[(j, k)] = x - I * hi;
    minus[(k, j)] = (x - I * hi).conj();
    let d_im = central(f, &plus, &minus, hi)?;
    Ok((d_re, Some(d_im)))
}

#[inline]
fn wirt(d_re: C64, d_im: C64) -> C64 {
    (d_re - I * d_im) * 0.5
}

#[inline]
fn wirt_conj(d_re: C64, d_im: C64) -> C64 {
    (d_re + I * d_im) * 0.5
}

#[inline]
fn herm_op(d_re: C64, d_im: Option<C64>) -> C64 {
    match d_im {
        None => d_re,
        Some(d_im) => (d_re + I * d_im) * 0.5,
    }
}

fn check_index(z: &CMatrix, j: usize, k: usize) -> Result<()> {
    if j >= z.rows() || k >= z.cols() {
        return Err(Error::DimensionMismatch(format!("index ({j}, {k}) outside {:?}", z.shape())));
    }
    Ok(())
}

/// Wirtinger partial `∂g/∂z_jk` by central differences.
pub fn fd_wirtinger(func: impl Fn(&CMatrix) -> C64, z: &CMatrix, j: usize, k: usize, step: f64) -> Result<C64> {
    check_index(z, j, k)?;
    let (d_re, d_im) = probe_entry(z, j, k, step, &|m: &CMatrix| Ok(vec![func(m)]))?;
    Ok(wirt(d_re[0], d_im[0]))
}

/// Conjugate Wirtinger partial `∂g/∂z̄_jk` by central differences.
pub fn fd_wirtinger_conj(func: impl Fn(&CMatrix) -> C64, z: &CMatrix, j: usize, k: usize, step: f64) -> Result<C64> {
    check_index(z, j, k)?;
    let (d_re, d_im) = probe_entry(z, j, k, step, &|m: &CMatrix| Ok(vec![func(m)]))?;
    Ok(wirt_conj(d_re[0], d_im[0]))
}

/// Hermitian-matrix partial `∂g/∂s_jk` by central differences along
/// Hermitian perturbations.
pub fn fd_hermitian(func: impl Fn(&CMatrix) -> C64, s: &CMatrix, j: usize, k: usize, step: f64) -> Result<C64> {
    if !s.is_hermitian(DEFAULT_TOL * s.max_abs().max(1.0)) {
        return Err(Error::NotHermitian { asymmetry: (s - &s.adjoint()).max_abs() });
    }
    check_index(s, j, k)?;
    let (d_re, d_im) = probe_hermitian(s, j, k, step, &|m: &CMatrix| Ok(vec![func(m)]))?;
    Ok(herm_op(d_re[0], d_im.map(|v| v[0])))
}

/// `Σ_jk ∂g_jk/∂z_jk` for a matrix function `g` of the same shape as `z`.
/// Its real part is `Tr Re(∇_Z' G)`.
pub fn fd_divergence(g: impl Fn(&CMatrix) -> Result<CMatrix>, z: &CMatrix, step: f64) -> Result<C64> {
    let mut acc = ZERO;
    for j in 0..z.rows() {
        for k in 0..z.cols() {
            let f = |m: &CMatrix| -> Result<Vec<C64>> {
                let out = g(m)?;
                if out.shape() != z.shape() {
                    return Err(Error::DimensionMismatch(format!("g returned {:?} for {:?}", out.shape(), z.shape())));
                }
                Ok(vec![out[(j, k)]])
            };
            let (d_re, d_im) = probe_entry(z, j, k, step, &f)?;
            acc += wirt(d_re[0], d_im[0]);
        }
    }
    Ok(acc)
}

/// `Tr(D_S G) = Σ_{j,l} ∂G_lj/∂s_jl` for a square matrix function of `s`.
pub fn fd_hermitian_trace(g: impl Fn(&CMatrix) -> Result<CMatrix>, s: &CMatrix, step: f64) -> Result<C64> {
    let p = s.rows();
    let mut acc = ZERO;
    for j in 0..p {
        for l in 0..p {
            let f = |m: &CMatrix| -> Result<Vec<C64>> {
                let out = g(m)?;
                if out.shape() != (p, p) {
                    return Err(Error::DimensionMismatch(format!("G returned {:?}, expected {p}x{p}", out.shape())));
                }
                Ok(vec![out[(l, j)]])
            };
            let (d_re, d_im) = probe_hermitian(s, j, l, step, &f)?;
            acc += herm_op(d_re[0], d_im.map(|v| v[0]));
        }
    }
    Ok(acc)
}

/// Rotates each column of `new` so that `base_l* M new_l` is real positive
/// (`M = I` when `metric` is `None`). Returns the removed phases.
fn align_columns(new: &mut CMatrix, base: &CMatrix, metric: Option<&CMatrix>) -> Vec<C64> {
    let mapped;
    let target = match metric {
        Some(m) => {
            mapped = m * new;
            &mapped
        }
        None => &*new,
    };
    let phases: Vec<C64> = (0..new.cols())
        .map(|l| {
            let ip: C64 = (0..new.rows()).map(|i| base[(i, l)].conj() * target[(i, l)]).sum();
            if ip.norm() > 0.0 {
                ip / ip.norm()
            } else {
                C64::new(1.0, 0.0)
            }
        })
        .collect();
    for l in 0..new.cols() {
        let c = phases[l].conj();
        for i in 0..new.rows() {
            new[(i, l)] *= c;
        }
    }
    phases
}

fn guard_gap(f: &[f64]) -> Result<()> {
    let gap = min_relative_gap(f);
    if gap < DEFAULT_GAP_TOL {
        return Err(Error::DegenerateSpectrum(format!("relative eigengap {gap:e} below {DEFAULT_GAP_TOL:e}")));
    }
    Ok(())
}

fn flatten(m: &CMatrix) -> impl Iterator<Item = C64> + '_ {
    m.as_slice().iter().copied()
}

fn real_vec(v: &[f64]) -> impl Iterator<Item = C64> + '_ {
    v.iter().map(|&x| C64::new(x, 0.0))
}

// ---------------------------------------------------------------------------
// Known covariance: W = Z*Z = U L U*

/// Derivatives of the eigendecomposition of `Z*Z`.
#[derive(Debug, Clone)]
pub struct KnownDerivs {
    pub eig: HermEigen,
    /// `∂u_il/∂z_jk`, dims `[p, p, m, p]`.
    pub du: Tensor,
    /// `∂ū_il/∂z_jk`, dims `[p, p, m, p]`.
    pub dubar: Tensor,
    /// `∂ℓ_i/∂z_jk`, dims `[p, m, p]`.
    pub dl: Tensor,
}

impl KnownDerivs {
    pub fn compare(&self, reference: &KnownDerivs, rel: f64, abs: f64) -> Vec<(&'static str, Comparison)> {
        vec![
            ("du", self.du.compare(&reference.du, rel, abs)),
            ("dubar", self.dubar.compare(&reference.dubar, rel, abs)),
            ("dl", self.dl.compare(&reference.dl, rel, abs)),
        ]
    }
}

pub fn eig_derivs_known(z: &CMatrix) -> Result<KnownDerivs> {
    let (m, p) = z.shape();
    let eig = herm_eigen(&z.gram(), DEFAULT_TOL)?;
    guard_gap(&eig.lambda)?;
    let (u, l) = (&eig.u, &eig.lambda);
    let v = z * u;
    let mut du = Tensor::zeros(&[p, p, m, p]);
    let mut dubar = Tensor::zeros(&[p, p, m, p]);
    let mut dl = Tensor::zeros(&[p, m, p]);
    for j in 0..m {
        for k in 0..p {
            for i in 0..p {
                for ll in 0..p {
                    let mut a = ZERO;
                    let mut b = ZERO;
                    for c in (0..p).filter(|&c| c != ll) {
                        let gap = l[ll] - l[c];
                        a += u[(i, c)] * v[(j, c)].conj() * u[(k, ll)] / gap;
                        b += u[(i, c)].conj() * u[(k, c)] * v[(j, ll)].conj() / gap;
                    }
                    du.set(&[i, ll, j, k], a);
                    dubar.set(&[i, ll, j, k], b);
                }
                dl.set(&[i, j, k], u[(k, i)] * v[(j, i)].conj());
            }
        }
    }
    Ok(KnownDerivs { eig, du, dubar, dl })
}

/// FD oracle for [`eig_derivs_known`], with eigenvector phases aligned to the
/// unperturbed decomposition.
pub fn fd_eig_derivs_known(z: &CMatrix, step: f64) -> Result<KnownDerivs> {
    let (m, p) = z.shape();
    let eig = herm_eigen(&z.gram(), DEFAULT_TOL)?;
    let base = eig.u.clone();
    let f = |zp: &CMatrix| -> Result<Vec<C64>> {
        let e = herm_eigen(&zp.gram(), DEFAULT_TOL)?;
        let mut u = e.u;
        align_columns(&mut u, &base, None);
        Ok(flatten(&u).chain(real_vec(&e.lambda)).collect())
    };
    let mut du = Tensor::zeros(&[p, p, m, p]);
    let mut dubar = Tensor::zeros(&[p, p, m, p]);
    let mut dl = Tensor::zeros(&[p, m, p]);
    for j in 0..m {
        for k in 0..p {
            let (dr, di) = probe_entry(z, j, k, step, &f)?;
            for i in 0..p {
                for l in 0..p {
                    let o = i * p + l;
                    du.set(&[i, l, j, k], wirt(dr[o], di[o]));
                    dubar.set(&[i, l, j, k], wirt(dr[o].conj(), di[o].conj()));
                }
                dl.set(&[i, j, k], wirt(dr[p * p + i], di[p * p + i]));
            }
        }
    }
    Ok(KnownDerivs { eig, du, dubar, dl })
}

/// FD of `∂u_il/∂z̄_jk`; by the conjugation law its conjugate equals `dubar`.
pub fn fd_eig_conj_derivs_known(z: &CMatrix, step: f64) -> Result<Tensor> {
    let (m, p) = z.shape();
    let base = herm_eigen(&z.gram(), DEFAULT_TOL)?.u;
    let f = |zp: &CMatrix| -> Result<Vec<C64>> {
        let mut u = herm_eigen(&zp.gram(), DEFAULT_TOL)?.u;
        align_columns(&mut u, &base, None);
        Ok(flatten(&u).collect())
    };
    let mut out = Tensor::zeros(&[p, p, m, p]);
    for j in 0..m {
        for k in 0..p {
            let (dr, di) = probe_entry(z, j, k, step, &f)?;
            for i in 0..p {
                for l in 0..p {
                    out.set(&[i, l, j, k], wirt_conj(dr[i * p + l], di[i * p + l]));
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Unknown covariance, m > p: A* S A = I, A* Z*Z A = F

/// Derivatives of the simultaneous reduction of `(Z*Z, S)`. `a^{ij}` denotes
/// the entries of `A⁻¹`.
#[derive(Debug, Clone)]
pub struct UnknownMgtpDerivs {
    pub sd: SimDiag,
    /// `∂a^{lk'}/∂z_jk`, dims `[p, p, m, p]`.
    pub da_inv: Tensor,
    /// `∂a_il/∂z_jk`, dims `[p, p, m, p]`.
    pub da: Tensor,
    /// `∂f_k'/∂z_jk`, dims `[p, m, p]`.
    pub df_dz: Tensor,
    /// `∂(a^{ki} ā^{kj})/∂s_ij`, dims `[p, p, p]` over `(k, i, j)`.
    pub dpair_ds: Tensor,
    /// `∂f_i/∂s_kk'`, dims `[p, p, p]` over `(i, k, k')`.
    pub df_ds: Tensor,
}

impl UnknownMgtpDerivs {
    pub fn compare(&self, reference: &UnknownMgtpDerivs, rel: f64, abs: f64) -> Vec<(&'static str, Comparison)> {
        vec![
            ("da_inv", self.da_inv.compare(&reference.da_inv, rel, abs)),
            ("da", self.da.compare(&reference.da, rel, abs)),
            ("df_dz", self.df_dz.compare(&reference.df_dz, rel, abs)),
            ("dpair_ds", self.dpair_ds.compare(&reference.dpair_ds, rel, abs)),
            ("df_ds", self.df_ds.compare(&reference.df_ds, rel, abs)),
        ]
    }
}

fn require_shape(z: &CMatrix, s: &CMatrix, branch: Branch) -> Result<(usize, usize)> {
    let (m, p) = z.shape();
    if s.shape() != (p, p) {
        return Err(Error::DimensionMismatch(format!("s is {:?}, expected {p}x{p}", s.shape())));
    }
    branch.check(m, p)?;
    Ok((m, p))
}

pub fn eig_derivs_unknown_mgtp(z: &CMatrix, s: &CMatrix) -> Result<UnknownMgtpDerivs> {
    let (m, p) = require_shape(z, s, Branch::MGtP)?;
    let sd = sim_diag(&z.gram(), s, DEFAULT_GAP_TOL)?;
    let (a, ai, f) = (&sd.a, sd.a_inv(), &sd.f);
    let v = z * a;
    let mut da_inv = Tensor::zeros(&[p, p, m, p]);
    let mut da = Tensor::zeros(&[p, p, m, p]);
    let mut df_dz = Tensor::zeros(&[p, m, p]);
    for j in 0..m {
        for k in 0..p {
            for x in 0..p {
                for y in 0..p {
                    // da_inv[l = x, k' = y], da[i = x, l = y]
                    let mut s1 = ZERO;
                    for c in (0..p).filter(|&c| c != x) {
                        s1 += v[(j, x)].conj() * a[(k, c)] * ai[(c, y)] / (f[x] - f[c]);
                    }
                    da_inv.set(&[x, y, j, k], s1);
                    let mut s2 = ZERO;
                    for c in (0..p).filter(|&c| c != y) {
                        s2 += a[(x, c)] * v[(j, c)].conj() * a[(k, y)] / (f[y] - f[c]);
                    }
                    da.set(&[x, y, j, k], s2);
                }
                df_dz.set(&[x, j, k], v[(j, x)].conj() * a[(k, x)]);
            }
        }
    }
    let mut dpair_ds = Tensor::zeros(&[p, p, p]);
    let mut df_ds = Tensor::zeros(&[p, p, p]);
    for k in 0..p {
        for i in 0..p {
            for j in 0..p {
                let mut val = ai[(k, i)] * ai[(k, j)].conj() * a[(j, k)].conj() * a[(i, k)];
                for b in (0..p).filter(|&b| b != k) {
                    let w = f[b] / (f[b] - f[k]);
                    val += ai[(k, i)] * a[(i, k)] * a[(j, b)].conj() * ai[(b, j)].conj() * w;
                    val += ai[(k, j)].conj() * a[(j, k)].conj() * a[(i, b)] * ai[(b, i)] * w;
                }
                dpair_ds.set(&[k, i, j], val);
                // here (i, k, k') = (k, i, j) relabelled
                df_ds.set(&[k, i, j], -(a[(j, k)].conj() * a[(i, k)] * f[k]));
            }
        }
    }
    Ok(UnknownMgtpDerivs { sd, da_inv, da, df_dz, dpair_ds, df_ds })
}

/// Simultaneous reduction re-phased against a base reduction in the
/// `S`-inner product.
fn aligned_sim_diag(w: &CMatrix, s: &CMatrix, base: &CMatrix, metric: &CMatrix) -> Result<(CMatrix, CMatrix, Vec<f64>)> {
    let sd = crate::cmatrix::sim_diag_unchecked(w, s)?;
    let mut a = sd.a.clone();
    let phases = align_columns(&mut a, base, Some(metric));
    let mut ai = sd.a_inv().clone();
    for (l, ph) in phases.iter().enumerate() {
        for c in 0..ai.cols() {
            ai[(l, c)] *= ph;
        }
    }
    Ok((a, ai, sd.f))
}

/// FD oracle for [`eig_derivs_unknown_mgtp`].
pub fn fd_eig_derivs_unknown_mgtp(z: &CMatrix, s: &CMatrix, step: f64) -> Result<UnknownMgtpDerivs> {
    let (m, p) = require_shape(z, s, Branch::MGtP)?;
    let sd = crate::cmatrix::sim_diag_unchecked(&z.gram(), s)?;
    let base = sd.a.clone();
    let fz = |zp: &CMatrix| -> Result<Vec<C64>> {
        let (a, ai, f) = aligned_sim_diag(&zp.gram(), s, &base, s)?;
        Ok(flatten(&a).chain(flatten(&ai)).chain(real_vec(&f)).collect())
    };
    let mut da_inv = Tensor::zeros(&[p, p, m, p]);
    let mut da = Tensor::zeros(&[p, p, m, p]);
    let mut df_dz = Tensor::zeros(&[p, m, p]);
    let pp = p * p;
    for j in 0..m {
        for k in 0..p {
            let (dr, di) = probe_entry(z, j, k, step, &fz)?;
            for x in 0..p {
                for y in 0..p {
                    let o = x * p + y;
                    da.set(&[x, y, j, k], wirt(dr[o], di[o]));
                    da_inv.set(&[x, y, j, k], wirt(dr[pp + o], di[pp + o]));
                }
                df_dz.set(&[x, j, k], wirt(dr[2 * pp + x], di[2 * pp + x]));
            }
        }
    }
    let w = z.gram();
    let mut dpair_ds = Tensor::zeros(&[p, p, p]);
    let mut df_ds = Tensor::zeros(&[p, p, p]);
    for i in 0..p {
        for j in 0..p {
            // slot (i, j): pair_k = a^{ki} conj(a^{kj}) for every k, then f
            let fs = |sp: &CMatrix| -> Result<Vec<C64>> {
                let sdp = crate::cmatrix::sim_diag_unchecked(&w, sp)?;
                let ai = sdp.a_inv();
                Ok((0..p).map(|k| ai[(k, i)] * ai[(k, j)].conj()).chain(real_vec(&sdp.f)).collect())
            };
            let (dr, di) = probe_hermitian(s, i, j, step, &fs)?;
            for k in 0..p {
                dpair_ds.set(&[k, i, j], herm_op(dr[k], di.as_ref().map(|d| d[k])));
                df_ds.set(&[k, i, j], herm_op(dr[p + k], di.as_ref().map(|d| d[p + k])));
            }
        }
    }
    Ok(UnknownMgtpDerivs { sd, da_inv, da, df_dz, dpair_ds, df_ds })
}

// ---------------------------------------------------------------------------
// Unknown covariance, p > m: T = Z S⁻¹ Z* = U F U*

/// Derivatives of the eigendecomposition of `Z S⁻¹ Z*`.
#[derive(Debug, Clone)]
pub struct UnknownPgtmDerivs {
    pub eig: HermEigen,
    /// `∂u_il/∂z_jk`, dims `[m, m, m, p]`.
    pub du: Tensor,
    /// `∂ū_il/∂z_jk`, dims `[m, m, m, p]`.
    pub dubar: Tensor,
    /// `∂f_b/∂z_jk`, dims `[m, m, p]`.
    pub df_dz: Tensor,
    /// `∂u_kl/∂s_ij`, dims `[m, m, p, p]`.
    pub du_ds: Tensor,
    /// `∂ū_kl/∂s_ij`, dims `[m, m, p, p]`.
    pub dubar_ds: Tensor,
    /// `∂f_l/∂s_ij`, dims `[m, p, p]`.
    pub df_ds: Tensor,
}

impl UnknownPgtmDerivs {
    pub fn compare(&self, reference: &UnknownPgtmDerivs, rel: f64, abs: f64) -> Vec<(&'static str, Comparison)> {
        vec![
            ("du", self.du.compare(&reference.du, rel, abs)),
            ("dubar", self.dubar.compare(&reference.dubar, rel, abs)),
            ("df_dz", self.df_dz.compare(&reference.df_dz, rel, abs)),
            ("du_ds", self.du_ds.compare(&reference.du_ds, rel, abs)),
            ("dubar_ds", self.dubar_ds.compare(&reference.dubar_ds, rel, abs)),
            ("df_ds", self.df_ds.compare(&reference.df_ds, rel, abs)),
        ]
    }
}

fn t_matrix(z: &CMatrix, s_inv: &CMatrix) -> CMatrix {
    (&(z * s_inv) * &z.adjoint()).hermitian_part()
}

pub fn eig_derivs_unknown_pgtm(z: &CMatrix, s: &CMatrix) -> Result<UnknownPgtmDerivs> {
    let (m, p) = require_shape(z, s, Branch::PGtM)?;
    let s_inv = herm_pd_inverse(s)?;
    let eig = herm_eigen(&t_matrix(z, &s_inv), DEFAULT_TOL)?;
    guard_gap(&eig.lambda)?;
    let (u, f) = (&eig.u, &eig.lambda);
    let y = &u.adjoint() * z;
    // R = S⁻¹ Y*  (p × m),  P = Y S⁻¹  (m × p)
    let r = &s_inv * &y.adjoint();
    let pm = &y * &s_inv;
    let mut du = Tensor::zeros(&[m, m, m, p]);
    let mut dubar = Tensor::zeros(&[m, m, m, p]);
    let mut df_dz = Tensor::zeros(&[m, m, p]);
    for j in 0..m {
        for k in 0..p {
            for i in 0..m {
                for l in 0..m {
                    let mut a = ZERO;
                    let mut b = ZERO;
                    for c in (0..m).filter(|&c| c != l) {
                        let gap = f[l] - f[c];
                        a += u[(i, c)] * u[(j, c)].conj() * r[(k, l)] / gap;
                        b += u[(i, c)].conj() * u[(j, l)].conj() * r[(k, c)] / gap;
                    }
                    du.set(&[i, l, j, k], a);
                    dubar.set(&[i, l, j, k], b);
                }
                df_dz.set(&[i, j, k], u[(j, i)].conj() * r[(k, i)]);
            }
        }
    }
    let mut du_ds = Tensor::zeros(&[m, m, p, p]);
    let mut dubar_ds = Tensor::zeros(&[m, m, p, p]);
    let mut df_ds = Tensor::zeros(&[m, p, p]);
    for i in 0..p {
        for j in 0..p {
            for k in 0..m {
                for l in 0..m {
                    let mut a = ZERO;
                    let mut b = ZERO;
                    for c in (0..m).filter(|&c| c != l) {
                        let gap = f[l] - f[c];
                        a -= u[(k, c)] * pm[(c, j)] * r[(i, l)] / gap;
                        b -= u[(k, c)].conj() * pm[(l, j)] * r[(i, c)] / gap;
                    }
                    du_ds.set(&[k, l, i, j], a);
                    dubar_ds.set(&[k, l, i, j], b);
                }
                df_ds.set(&[k, i, j], -(pm[(k, j)] * r[(i, k)]));
            }
        }
    }
    Ok(UnknownPgtmDerivs { eig, du, dubar, df_dz, du_ds, dubar_ds, df_ds })
}

/// FD oracle for [`eig_derivs_unknown_pgtm`].
pub fn fd_eig_derivs_unknown_pgtm(z: &CMatrix, s: &CMatrix, step: f64) -> Result<UnknownPgtmDerivs> {
    let (m, p) = require_shape(z, s, Branch::PGtM)?;
    let s_inv = herm_pd_inverse(s)?;
    let eig = herm_eigen(&t_matrix(z, &s_inv), DEFAULT_TOL)?;
    let base = eig.u.clone();
    let decompose = |zp: &CMatrix, sp_inv: &CMatrix| -> Result<Vec<C64>> {
        let e = herm_eigen(&t_matrix(zp, sp_inv), DEFAULT_TOL)?;
        let mut u = e.u;
        align_columns(&mut u, &base, None);
        Ok(flatten(&u).chain(real_vec(&e.lambda)).collect())
    };
    let mm = m * m;
    let mut du = Tensor::zeros(&[m, m, m, p]);
    let mut dubar = Tensor::zeros(&[m, m, m, p]);
    let mut df_dz = Tensor::zeros(&[m, m, p]);
    for j in 0..m {
        for k in 0..p {
            let (dr, di) = probe_entry(z, j, k, step, &|zp: &CMatrix| decompose(zp, &s_inv))?;
            for i in 0..m {
                for l in 0..m {
                    let o = i * m + l;
                    du.set(&[i, l, j, k], wirt(dr[o], di[o]));
                    dubar.set(&[i, l, j, k], wirt(dr[o].conj(), di[o].conj()));
                }
                df_dz.set(&[i, j, k], wirt(dr[mm + i], di[mm + i]));
            }
        }
    }
    let mut du_ds = Tensor::zeros(&[m, m, p, p]);
    let mut dubar_ds = Tensor::zeros(&[m, m, p, p]);
    let mut df_ds = Tensor::zeros(&[m, p, p]);
    let fs = |sp: &CMatrix| -> Result<Vec<C64>> { decompose(z, &herm_pd_inverse(sp)?) };
    for i in 0..p {
        for j in 0..p {
            let (dr, di) = probe_hermitian(s, i, j, step, &fs)?;
            let conj_im = di.as_ref().map(|d| d.iter().map(|x| x.conj()).collect::<Vec<_>>());
            for k in 0..m {
                for l in 0..m {
                    let o = k * m + l;
                    du_ds.set(&[k, l, i, j], herm_op(dr[o], di.as_ref().map(|d| d[o])));
                    dubar_ds.set(&[k, l, i, j], herm_op(dr[o].conj(), conj_im.as_ref().map(|d| d[o])));
                }
                df_ds.set(&[k, i, j], herm_op(dr[mm + k], di.as_ref().map(|d| d[mm + k])));
            }
        }
    }
    Ok(UnknownPgtmDerivs { eig, du, dubar, df_dz, du_ds, dubar_ds, df_ds })
}

// ---------------------------------------------------------------------------
// Divergences

/// `Σ_{b>k} (x_k − x_b) / (f_k − f_b)` for each `k`.
fn gap_sums(f: &[f64], x: &[f64]) -> Vec<f64> {
    (0..f.len()).map(|k| ((k + 1)..f.len()).map(|b| (x[k] - x[b]) / (f[k] - f[b])).sum()).collect()
}

fn profile_at(phi: &ShrinkageProfile, f: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let v = phi.eval(f)?;
    Ok((v.h, v.h_deriv))
}

/// Closed form of `Tr Re(∇_Z' Z U Φ(L) U*)`:
/// `Σ_k {(m−p+1)φ_k + 2Σ_{c>k}(ℓ_kφ_k − ℓ_cφ_c)/(ℓ_k−ℓ_c) + ℓ_k φ_kk}`.
pub fn divergence_known(z: &CMatrix, phi: &ShrinkageProfile) -> Result<f64> {
    let (m, p) = z.shape();
    let eig = herm_eigen(&z.gram(), DEFAULT_TOL)?;
    guard_gap(&eig.lambda)?;
    divergence_known_at(m, p, &eig.lambda, phi)
}

pub(crate) fn divergence_known_at(m: usize, p: usize, l: &[f64], phi: &ShrinkageProfile) -> Result<f64> {
    let (ph, dph) = profile_at(phi, l)?;
    let lp: Vec<f64> = l.iter().zip(&ph).map(|(a, b)| a * b).collect();
    let g = gap_sums(l, &lp);
    let c = (m as f64) - (p as f64) + 1.0;
    Ok((0..p).map(|k| c * ph[k] + 2.0 * g[k] + l[k] * dph[k]).sum())
}

fn unknown_f(z: &CMatrix, s: &CMatrix, branch: Branch) -> Result<Vec<f64>> {
    require_shape(z, s, branch)?;
    let d = unknown_decomposition_unchecked(z, s)?;
    let f = d.f().to_vec();
    guard_gap(&f)?;
    if let UnknownDecomposition::MGtP(_) = d {
        sim_diag(&z.gram(), s, DEFAULT_GAP_TOL)?;
    }
    Ok(f)
}

/// Closed form of the `Z`-divergence: `Tr Re(∇_Z' Z A Φ A⁻¹)` for `m > p`,
/// `Tr Re(∇_Z' U Φ U* Z)` for `p > m`.
pub fn divergence_unknown_z(z: &CMatrix, s: &CMatrix, phi: &ShrinkageProfile, branch: Branch) -> Result<f64> {
    let (m, p) = z.shape();
    let f = unknown_f(z, s, branch)?;
    let (ph, dph) = profile_at(phi, &f)?;
    let fp: Vec<f64> = f.iter().zip(&ph).map(|(a, b)| a * b).collect();
    let g = gap_sums(&f, &fp);
    let c = match branch {
        Branch::MGtP => m as f64 - p as f64 + 1.0,
        Branch::PGtM => p as f64 - m as f64 + 1.0,
    };
    Ok((0..f.len()).map(|k| f[k] * dph[k] + c * ph[k] + 2.0 * g[k]).sum())
}

/// Closed form of the `S`-divergence: `Tr D_S((A*)⁻¹ Φ A⁻¹)` for `m > p`,
/// `Tr D_S(Z* U Φ U* Z)` for `p > m`.
pub fn divergence_unknown_s(z: &CMatrix, s: &CMatrix, phi: &ShrinkageProfile, branch: Branch) -> Result<f64> {
    let (m, p) = z.shape();
    let f = unknown_f(z, s, branch)?;
    let (ph, dph) = profile_at(phi, &f)?;
    Ok(match branch {
        Branch::MGtP => {
            let fp: Vec<f64> = f.iter().zip(&ph).map(|(a, b)| a * b).collect();
            let g = gap_sums(&f, &fp);
            (0..p).map(|k| (2.0 * p as f64 - 1.0) * ph[k] - 2.0 * g[k] - f[k] * dph[k]).sum()
        }
        Branch::PGtM => {
            let ffp: Vec<f64> = f.iter().zip(&ph).map(|(a, b)| a * a * b).collect();
            let g = gap_sums(&f, &ffp);
            -(0..m)
                .map(|k| f[k] * f[k] * dph[k] - 2.0 * (m as f64 - 1.0) * f[k] * ph[k] + 2.0 * g[k])
                .sum::<f64>()
        }
    })
}

/// `Z U Φ(L) U*` with `Z*Z = U L U*`.
pub fn known_divergence_field(z: &CMatrix, phi: &ShrinkageProfile) -> Result<CMatrix> {
    let e = herm_eigen(&z.gram(), DEFAULT_TOL)?;
    let ph = phi.eval(&e.lambda)?.h;
    Ok(z * &(&e.u.mul_diag_right(&ph) * &e.u.adjoint()))
}

/// `Z A Φ(F) A⁻¹` (`m > p`) or `U Φ(F) U* Z` (`p > m`).
pub fn unknown_z_field(z: &CMatrix, s: &CMatrix, phi: &ShrinkageProfile) -> Result<CMatrix> {
    match unknown_decomposition_unchecked(z, s)? {
        UnknownDecomposition::MGtP(sd) => {
            let ph = phi.eval(&sd.f)?.h;
            Ok(z * &(&sd.a.mul_diag_right(&ph) * sd.a_inv()))
        }
        UnknownDecomposition::PGtM(e) => {
            let ph = phi.eval(&e.lambda)?.h;
            Ok(&(&e.u.mul_diag_right(&ph) * &e.u.adjoint()) * z)
        }
    }
}

/// `(A*)⁻¹ Φ(F) A⁻¹` (`m > p`) or `Z* U Φ(F) U* Z` (`p > m`).
pub fn unknown_s_field(z: &CMatrix, s: &CMatrix, phi: &ShrinkageProfile) -> Result<CMatrix> {
    match unknown_decomposition_unchecked(z, s)? {
        UnknownDecomposition::MGtP(sd) => {
            let ph = phi.eval(&sd.f)?.h;
            let ai = sd.a_inv();
            Ok(&ai.adjoint().mul_diag_right(&ph) * ai)
        }
        UnknownDecomposition::PGtM(e) => {
            let ph = phi.eval(&e.lambda)?.h;
            let y = &e.u.adjoint() * z;
            Ok(&y.adjoint().mul_diag_right(&ph) * &y)
        }
    }
}

/// Coordinate-summed FD counterpart of [`divergence_known`].
pub fn fd_divergence_known(z: &CMatrix, phi: &ShrinkageProfile, step: f64) -> Result<f64> {
    Ok(fd_divergence(|zp| known_divergence_field(zp, phi), z, step)?.re)
}

/// Coordinate-summed FD counterpart of [`divergence_unknown_z`].
pub fn fd_divergence_unknown_z(z: &CMatrix, s: &CMatrix, phi: &ShrinkageProfile, branch: Branch, step: f64) -> Result<f64> {
    require_shape(z, s, branch)?;
    Ok(fd_divergence(|zp| unknown_z_field(zp, s, phi), z, step)?.re)
}

/// Hermitian-FD counterpart of [`divergence_unknown_s`].
pub fn fd_divergence_unknown_s(z: &CMatrix, s: &CMatrix, phi: &ShrinkageProfile, branch: Branch, step: f64) -> Result<f64> {
    require_shape(z, s, branch)?;
    Ok(fd_hermitian_trace(|sp| unknown_s_field(z, sp, phi), s, step)?.re)
}
