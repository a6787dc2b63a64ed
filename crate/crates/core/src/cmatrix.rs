//! Dense complex matrices and the Hermitian factorizations the estimators
//! are built on.
//!
//! Everything here is small-dimension, row-major, and allocation-per-result.
//! The eigensolver is a cyclic two-sided complex Jacobi method: slow for large
//! matrices but accurate to working precision in both eigenvalues and
//! eigenvectors, and bit-deterministic for a given input. The latter matters
//! because the calculus module differences eigenvectors numerically.

use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Sub};

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default absolute tolerance for max-norm checks, scaled by `max(1, ‖M‖_max)`.
pub const DEFAULT_TOL: f64 = 1e-10;

/// Relative eigengap below which gap-dividing operations refuse to run.
pub const DEFAULT_GAP_TOL: f64 = 1e-8;

/// Smallest-to-largest eigenvalue ratio below which a Gram matrix is treated
/// as singular.
pub const SINGULAR_RATIO: f64 = 1e-12;

const MAX_SWEEPS: usize = 100;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixJson", into = "MatrixJson")]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

/// Wire form: `{"rows": r, "cols": c, "re": [...], "im": [...]}`, row-major.
#[derive(Serialize, Deserialize)]
struct MatrixJson {
    rows: usize,
    cols: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl TryFrom<MatrixJson> for CMatrix {
    type Error = String;

    fn try_from(m: MatrixJson) -> std::result::Result<Self, String> {
        if m.rows == 0 || m.cols == 0 {
            return Err("rows and cols must be positive".into());
        }
        let n = m.rows * m.cols;
        if m.re.len() != n || m.im.len() != n {
            return Err(format!(
                "expected {} entries in re and im, got {} and {}",
                n,
                m.re.len(),
                m.im.len()
            ));
        }
        let data = m.re.iter().zip(&m.im).map(|(&r, &i)| C64::new(r, i)).collect();
        Ok(CMatrix { rows: m.rows, cols: m.cols, data })
    }
}

impl From<CMatrix> for MatrixJson {
    fn from(m: CMatrix) -> Self {
        MatrixJson {
            rows: m.rows,
            cols: m.cols,
            re: m.data.iter().map(|z| z.re).collect(),
            im: m.data.iter().map(|z| z.im).collect(),
        }
    }
}

impl fmt::Debug for CMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "CMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            write!(f, "  ")?;
            for j in 0..self.cols {
                let z = self[(i, j)];
                write!(f, "{:>12.6}{:+.6}i ", z.re, z.im)?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl Index<(usize, usize)> for CMatrix {
    type Output = C64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for CMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        CMatrix { rows, cols, data: vec![C64::new(0.0, 0.0); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = C64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    /// Builds from row-major entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} entries for a {}x{} matrix",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(CMatrix { rows, cols, data })
    }

    /// Real matrix from row-major entries.
    pub fn from_real(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Self::from_vec(rows, cols, data.iter().map(|&x| C64::new(x, 0.0)).collect())
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &x) in d.iter().enumerate() {
            m[(i, i)] = C64::new(x, 0.0);
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Row-major entries.
    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn conj(&self) -> Self {
        self.map(|z| z.conj())
    }

    pub fn map(&self, f: impl Fn(C64) -> C64) -> Self {
        CMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&z| f(z)).collect() }
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|z| z * c)
    }

    pub fn scale_c(&self, c: C64) -> Self {
        self.map(|z| z * c)
    }

    pub fn trace(&self) -> C64 {
        debug_assert!(self.is_square());
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Squared Frobenius norm.
    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &CMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    fn asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in i..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)].conj()).norm());
            }
        }
        worst
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.is_square() && self.asymmetry() <= tol
    }

    pub fn is_unitary(&self, tol: f64) -> bool {
        self.is_square() && (&self.adjoint() * self).max_abs_diff(&Self::identity(self.rows)) <= tol
    }

    /// `(M + M*) / 2`.
    pub fn hermitian_part(&self) -> Self {
        debug_assert!(self.is_square());
        Self::from_fn(self.rows, self.cols, |i, j| (self[(i, j)] + self[(j, i)].conj()) * 0.5)
    }

    /// Multiply by a real diagonal on the right: `M · Diag(d)`.
    pub fn mul_diag_right(&self, d: &[f64]) -> Self {
        assert_eq!(d.len(), self.cols);
        Self::from_fn(self.rows, self.cols, |i, j| self[(i, j)] * d[j])
    }

    /// Multiply by a real diagonal on the left: `Diag(d) · M`.
    pub fn mul_diag_left(&self, d: &[f64]) -> Self {
        assert_eq!(d.len(), self.rows);
        Self::from_fn(self.rows, self.cols, |i, j| self[(i, j)] * d[i])
    }

    /// `M* M`.
    pub fn gram(&self) -> Self {
        let n = self.cols;
        let mut g = Self::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut acc = C64::new(0.0, 0.0);
                for k in 0..self.rows {
                    acc += self[(k, i)].conj() * self[(k, j)];
                }
                g[(i, j)] = acc;
                g[(j, i)] = acc.conj();
            }
            g[(i, i)].im = 0.0;
        }
        g
    }

    pub fn try_mul(&self, rhs: &CMatrix) -> Result<CMatrix> {
        if self.cols != rhs.rows {
            return Err(Error::DimensionMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        Ok(self * rhs)
    }

    /// General inverse by Gauss-Jordan elimination with partial pivoting.
    pub fn inverse(&self) -> Result<CMatrix> {
        if !self.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "inverse of non-square {}x{}",
                self.rows, self.cols
            )));
        }
        let n = self.rows;
        let mut a = self.clone();
        let mut inv = Self::identity(n);
        let scale = self.max_abs();
        for col in 0..n {
            let (piv, piv_abs) = (col..n)
                .map(|r| (r, a[(r, col)].norm()))
                .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if piv_abs <= f64::EPSILON * scale * n as f64 || piv_abs == 0.0 {
                return Err(Error::Singular);
            }
            if piv != col {
                for j in 0..n {
                    a.data.swap(piv * n + j, col * n + j);
                    inv.data.swap(piv * n + j, col * n + j);
                }
            }
            let d = a[(col, col)].inv();
            for j in 0..n {
                a[(col, j)] *= d;
                inv[(col, j)] *= d;
            }
            for r in 0..n {
                if r == col {
                    continue;
                }
                let factor = a[(r, col)];
                if factor == C64::new(0.0, 0.0) {
                    continue;
                }
                for j in 0..n {
                    let av = a[(col, j)];
                    let iv = inv[(col, j)];
                    a[(r, j)] -= factor * av;
                    inv[(r, j)] -= factor * iv;
                }
            }
        }
        Ok(inv)
    }

    fn check_hermitian(&self, tol: f64) -> Result<()> {
        if !self.is_square() {
            return Err(Error::NotHermitian { asymmetry: f64::INFINITY });
        }
        let asym = self.asymmetry();
        if asym > tol * self.max_abs().max(1.0) || !asym.is_finite() {
            return Err(Error::NotHermitian { asymmetry: asym });
        }
        Ok(())
    }
}

impl Mul for &CMatrix {
    type Output = CMatrix;

    fn mul(self, rhs: &CMatrix) -> CMatrix {
        assert_eq!(self.cols, rhs.rows, "dimension mismatch in product");
        let mut out = CMatrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == C64::new(0.0, 0.0) {
                    continue;
                }
                for j in 0..rhs.cols {
                    out.data[i * rhs.cols + j] += a * rhs.data[k * rhs.cols + j];
                }
            }
        }
        out
    }
}

impl Add for &CMatrix {
    type Output = CMatrix;

    fn add(self, rhs: &CMatrix) -> CMatrix {
        assert_eq!(self.shape(), rhs.shape(), "dimension mismatch in sum");
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Sub for &CMatrix {
    type Output = CMatrix;

    fn sub(self, rhs: &CMatrix) -> CMatrix {
        assert_eq!(self.shape(), rhs.shape(), "dimension mismatch in difference");
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        }
    }
}

/// Eigendecomposition `H = U · Diag(λ) · U*` with `λ` descending.
#[derive(Debug, Clone, PartialEq)]
pub struct HermEigen {
    pub u: CMatrix,
    pub lambda: Vec<f64>,
}

impl HermEigen {
    pub fn reconstruct(&self) -> CMatrix {
        &self.u.mul_diag_right(&self.lambda) * &self.u.adjoint()
    }

    /// Smallest consecutive gap relative to the largest |eigenvalue|;
    /// `+inf` for a single eigenvalue.
    pub fn min_relative_gap(&self) -> f64 {
        min_relative_gap(&self.lambda)
    }
}

/// Smallest `(x_k - x_{k+1}) / max|x|` over a descending vector.
pub fn min_relative_gap(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return f64::INFINITY;
    }
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    x.windows(2).map(|w| (w[0] - w[1]) / scale).fold(f64::INFINITY, f64::min)
}

/// Hermitian eigendecomposition by cyclic complex Jacobi sweeps.
///
/// Eigenvalues come back strictly in descending order (ties keep their
/// original diagonal order) and each eigenvector column is scaled so its
/// largest-modulus entry is real and positive.
pub fn herm_eigen(h: &CMatrix, tol: f64) -> Result<HermEigen> {
    h.check_hermitian(tol)?;
    jacobi_eigen(&h.hermitian_part(), tol)
}

fn jacobi_eigen(h: &CMatrix, tol: f64) -> Result<HermEigen> {
    let n = h.rows;
    let mut a = h.clone();
    let mut v = CMatrix::identity(n);
    let frob = h.norm_sqr().sqrt();

    let off_norm = |a: &CMatrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[(i, j)].norm_sqr();
                }
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    loop {
        let off = off_norm(&a);
        if off == 0.0 || off <= f64::MIN_POSITIVE {
            break;
        }
        if sweeps == MAX_SWEEPS {
            if off > tol * frob.max(1.0) {
                return Err(Error::NoConvergence { off_norm: off, sweeps });
            }
            break;
        }
        sweeps += 1;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                let r = apq.norm();
                if r == 0.0 {
                    continue;
                }
                let app = a[(p, p)].re;
                let aqq = a[(q, q)].re;
                // Once the matrix is nearly diagonal, drop rotations that cannot
                // change either diagonal entry in floating point.
                let g = 100.0 * r;
                if sweeps > 4 && app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
                    a[(p, q)] = C64::new(0.0, 0.0);
                    a[(q, p)] = C64::new(0.0, 0.0);
                    continue;
                }
                let phase = apq / r;
                let theta = (aqq - app) / (2.0 * r);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    let s = if theta >= 0.0 { 1.0 } else { -1.0 };
                    s / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // G = Diag(1, conj(phase)) · [[c, s], [-s, c]]
                let gpp = C64::new(c, 0.0);
                let gpq = C64::new(s, 0.0);
                let gqp = phase.conj() * (-s);
                let gqq = phase.conj() * c;

                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = akp * gpp + akq * gqp;
                    a[(k, q)] = akp * gpq + akq * gqq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = gpp.conj() * apk + gqp.conj() * aqk;
                    a[(q, k)] = gpq.conj() * apk + gqq.conj() * aqk;
                }
                a[(p, q)] = C64::new(0.0, 0.0);
                a[(q, p)] = C64::new(0.0, 0.0);
                a[(p, p)].im = 0.0;
                a[(q, q)].im = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = vkp * gpp + vkq * gqp;
                    v[(k, q)] = vkp * gpq + vkq * gqq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    // stable: ties stay in diagonal order
    order.sort_by(|&i, &j| a[(j, j)].re.partial_cmp(&a[(i, i)].re).unwrap_or(std::cmp::Ordering::Equal));
    let lambda: Vec<f64> = order.iter().map(|&i| a[(i, i)].re).collect();
    if lambda.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFiniteResult("eigenvalues".into()));
    }
    let mut u = CMatrix::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for k in 0..n {
            u[(k, new_col)] = v[(k, old_col)];
        }
    }
    normalize_column_phases(&mut u);
    Ok(HermEigen { u, lambda })
}

/// Rotates each column so that its largest-modulus entry (first one on ties)
/// is real and positive.
pub fn normalize_column_phases(u: &mut CMatrix) {
    for j in 0..u.cols {
        let mut best = 0;
        let mut best_abs = -1.0;
        for i in 0..u.rows {
            let m = u[(i, j)].norm();
            if m > best_abs {
                best_abs = m;
                best = i;
            }
        }
        if best_abs <= 0.0 {
            continue;
        }
        let ph = (u[(best, j)] / best_abs).conj();
        for i in 0..u.rows {
            u[(i, j)] *= ph;
        }
        u[(best, j)].im = 0.0;
    }
}

/// Lower-triangular `L` with real positive diagonal and `L L* = h`.
pub fn cholesky(h: &CMatrix) -> Result<CMatrix> {
    h.check_hermitian(DEFAULT_TOL)?;
    let n = h.rows;
    let mut l = CMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = h[(j, j)].re;
        for k in 0..j {
            d -= l[(j, k)].norm_sqr();
        }
        if !(d > 0.0) {
            return Err(Error::NotPositiveDefinite { pivot: d, index: j });
        }
        let ljj = d.sqrt();
        l[(j, j)] = C64::new(ljj, 0.0);
        for i in (j + 1)..n {
            let mut acc = h[(i, j)];
            for k in 0..j {
                acc -= l[(i, k)] * l[(j, k)].conj();
            }
            l[(i, j)] = acc / ljj;
        }
    }
    Ok(l)
}

/// Inverse of a lower-triangular matrix by forward substitution.
pub fn lower_triangular_inverse(l: &CMatrix) -> Result<CMatrix> {
    let n = l.rows;
    let mut inv = CMatrix::zeros(n, n);
    for col in 0..n {
        for i in col..n {
            let mut acc = if i == col { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) };
            for k in col..i {
                acc -= l[(i, k)] * inv[(k, col)];
            }
            let d = l[(i, i)];
            if d.norm() == 0.0 {
                return Err(Error::Singular);
            }
            inv[(i, col)] = acc / d;
        }
    }
    Ok(inv)
}

/// Inverse of a Hermitian positive-definite matrix via Cholesky.
pub fn herm_pd_inverse(h: &CMatrix) -> Result<CMatrix> {
    let l = cholesky(h)?;
    let li = lower_triangular_inverse(&l)?;
    Ok((&li.adjoint() * &li).hermitian_part())
}

fn herm_function(k: &CMatrix, f: impl Fn(f64) -> f64) -> Result<CMatrix> {
    let eig = herm_eigen(k, DEFAULT_TOL)?;
    if let Some((idx, &lam)) = eig.lambda.iter().enumerate().find(|(_, &l)| !(l > 0.0)) {
        return Err(Error::NotPositiveDefinite { pivot: lam, index: idx });
    }
    let d: Vec<f64> = eig.lambda.iter().map(|&l| f(l)).collect();
    Ok((&eig.u.mul_diag_right(&d) * &eig.u.adjoint()).hermitian_part())
}

/// `K^{-1/2}` for Hermitian positive-definite `K`.
pub fn inv_sqrt_herm(k: &CMatrix) -> Result<CMatrix> {
    herm_function(k, |l| 1.0 / l.sqrt())
}

/// `K^{1/2}` for Hermitian positive-definite `K`.
pub fn sqrt_herm(k: &CMatrix) -> Result<CMatrix> {
    herm_function(k, f64::sqrt)
}

/// Simultaneous reduction of a pair `(W, S)`: `A* S A = I`, `A* W A = Diag(f)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimDiag {
    pub a: CMatrix,
    pub f: Vec<f64>,
    a_inv: CMatrix,
}

impl SimDiag {
    /// `A^{-1}`, available exactly as `V* L*` from the construction.
    pub fn a_inv(&self) -> &CMatrix {
        &self.a_inv
    }

    pub fn min_relative_gap(&self) -> f64 {
        min_relative_gap(&self.f)
    }
}

/// Simultaneous diagonalization of `w` (Hermitian PSD) and `s` (Hermitian PD).
///
/// Rejects pairs whose generalized eigenvalues have a relative gap below
/// `tol`, or whose smallest eigenvalue is not positive relative to the
/// largest.
pub fn sim_diag(w: &CMatrix, s: &CMatrix, tol: f64) -> Result<SimDiag> {
    let sd = sim_diag_unchecked(w, s)?;
    let fmax = sd.f[0];
    let fmin = *sd.f.last().unwrap();
    if !(fmin > SINGULAR_RATIO * fmax) {
        return Err(Error::DegenerateSpectrum(format!(
            "smallest generalized eigenvalue {fmin:e} vs largest {fmax:e}"
        )));
    }
    let gap = sd.min_relative_gap();
    if gap < tol {
        return Err(Error::DegenerateSpectrum(format!("relative eigengap {gap:e} below {tol:e}")));
    }
    Ok(sd)
}

/// [`sim_diag`] without the spectrum guards; used where a degenerate draw
/// should be flagged rather than rejected.
pub(crate) fn sim_diag_unchecked(w: &CMatrix, s: &CMatrix) -> Result<SimDiag> {
    if !w.is_square() || w.shape() != s.shape() {
        return Err(Error::DimensionMismatch(format!(
            "sim_diag of {:?} and {:?}",
            w.shape(),
            s.shape()
        )));
    }
    w.check_hermitian(DEFAULT_TOL)?;
    let l = cholesky(s)?;
    let li = lower_triangular_inverse(&l)?;
    let m = (&(&li * w) * &li.adjoint()).hermitian_part();
    let eig = jacobi_eigen(&m, DEFAULT_TOL)?;
    let a = &li.adjoint() * &eig.u;
    let a_inv = &eig.u.adjoint() * &l.adjoint();
    Ok(SimDiag { a, f: eig.lambda, a_inv })
}
