//! Samplers for the complex matrix normal `CN(Ξ, K⊗Σ)` and complex Wishart
//! `CW_p(Σ, n)` laws.
//!
//! Standard complex normal entries have independent real and imaginary parts
//! of variance 1/2 each, so `E|e|² = 1`.

use std::f64::consts::TAU;

use num_complex::Complex64 as C64;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cmatrix::{cholesky, sqrt_herm, CMatrix, DEFAULT_TOL};
use crate::error::{Error, Result};

/// Deterministic random stream keyed by `(seed, stream_index)`.
///
/// Distinct indices select disjoint ChaCha streams under the same key, so
/// replicate `r` always sees the same numbers no matter which thread runs it.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_index: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_index);
        RngStream { seed, stream_index, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_index(&self) -> u64 {
        self.stream_index
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on (0, 1), never exactly zero.
    pub fn uniform(&mut self) -> f64 {
        loop {
            let u = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            if u > 0.0 {
                return u;
            }
        }
    }

    /// Standard real normal via Box-Muller (one of the pair is discarded).
    pub fn standard_normal(&mut self) -> f64 {
        let r = (-2.0 * self.uniform().ln()).sqrt();
        r * (TAU * self.uniform()).cos()
    }

    /// Standard circular complex normal: Re, Im iid N(0, 1/2).
    pub fn complex_normal(&mut self) -> C64 {
        let r = (-self.uniform().ln()).sqrt();
        let t = TAU * self.uniform();
        C64::new(r * t.cos(), r * t.sin())
    }

    pub fn complex_normal_matrix(&mut self, rows: usize, cols: usize) -> CMatrix {
        CMatrix::from_fn(rows, cols, |_, _| self.complex_normal())
    }
}

/// Parameters of the pair `Z ~ CN_{m×p}(Ξ, K⊗Σ)`, `S ~ CW_p(Σ, n)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub m: usize,
    pub p: usize,
    pub n: usize,
    pub xi: CMatrix,
    pub sigma: CMatrix,
    pub k: CMatrix,
}

impl ModelParams {
    pub fn new(n: usize, xi: CMatrix, sigma: CMatrix, k: CMatrix) -> Result<Self> {
        let (m, p) = xi.shape();
        let params = ModelParams { m, p, n, xi, sigma, k };
        params.validate()?;
        Ok(params)
    }

    /// Identity covariances.
    pub fn standard(n: usize, xi: CMatrix) -> Result<Self> {
        let (m, p) = xi.shape();
        Self::new(n, xi, CMatrix::identity(p), CMatrix::identity(m))
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.p == 0 {
            return Err(Error::DimensionMismatch("m and p must be positive".into()));
        }
        if self.xi.shape() != (self.m, self.p) {
            return Err(Error::DimensionMismatch(format!(
                "xi is {:?}, expected ({}, {})",
                self.xi.shape(),
                self.m,
                self.p
            )));
        }
        if self.sigma.shape() != (self.p, self.p) {
            return Err(Error::DimensionMismatch(format!("sigma is {:?}, expected p = {}", self.sigma.shape(), self.p)));
        }
        if self.k.shape() != (self.m, self.m) {
            return Err(Error::DimensionMismatch(format!("k is {:?}, expected m = {}", self.k.shape(), self.m)));
        }
        if self.n <= self.p {
            return Err(Error::DegenerateSample(format!("n = {} must exceed p = {}", self.n, self.p)));
        }
        cholesky(&self.sigma)?;
        cholesky(&self.k)?;
        Ok(())
    }
}

/// Caches the covariance square roots so repeated draws skip the
/// factorizations.
#[derive(Clone, Debug)]
pub struct ModelSampler {
    params: ModelParams,
    sigma_half: CMatrix,
    k_half: CMatrix,
}

impl ModelSampler {
    pub fn new(params: ModelParams) -> Result<Self> {
        params.validate()?;
        let sigma_half = sqrt_herm(&params.sigma)?;
        let k_half = sqrt_herm(&params.k)?;
        Ok(ModelSampler { params, sigma_half, k_half })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn sample_z(&self, rng: &mut RngStream) -> CMatrix {
        let e = rng.complex_normal_matrix(self.params.m, self.params.p);
        &self.params.xi + &(&(&self.k_half * &e) * &self.sigma_half)
    }

    pub fn sample_s(&self, rng: &mut RngStream) -> Result<CMatrix> {
        wishart_from_root(&self.sigma_half, self.params.n, rng)
    }

    /// One replicate: `Z` first, then `S`, from the same stream.
    pub fn sample_pair(&self, rng: &mut RngStream) -> Result<(CMatrix, CMatrix)> {
        let z = self.sample_z(rng);
        let s = self.sample_s(rng)?;
        Ok((z, s))
    }
}

/// `Z = Ξ + K^{1/2} E Σ^{1/2}` with `E` standard complex normal.
pub fn sample_cn_matrix(params: &ModelParams, rng: &mut RngStream) -> Result<CMatrix> {
    Ok(ModelSampler::new(params.clone())?.sample_z(rng))
}

/// `S = Σ^{1/2} (Σ_i x_i x_i*) Σ^{1/2}` with `x_i` iid standard complex normal.
pub fn sample_cwishart(sigma: &CMatrix, n: usize, rng: &mut RngStream) -> Result<CMatrix> {
    if !sigma.is_square() {
        return Err(Error::DimensionMismatch(format!("sigma is {:?}", sigma.shape())));
    }
    if !sigma.is_hermitian(DEFAULT_TOL * sigma.max_abs().max(1.0)) {
        return Err(Error::NotHermitian { asymmetry: f64::NAN });
    }
    let root = sqrt_herm(sigma)?;
    wishart_from_root(&root, n, rng)
}

fn wishart_from_root(root: &CMatrix, n: usize, rng: &mut RngStream) -> Result<CMatrix> {
    let p = root.rows();
    if n <= p {
        return Err(Error::DegenerateSample(format!("n = {n} must exceed p = {p}")));
    }
    let x = rng.complex_normal_matrix(n, p);
    let s = (&(root * &x.gram()) * root).hermitian_part();
    match cholesky(&s) {
        Ok(_) => Ok(s),
        Err(Error::NotPositiveDefinite { pivot, index }) => Err(Error::DegenerateSample(format!(
            "Wishart draw not positive definite (pivot {pivot:e} at {index})"
        ))),
        Err(e) => Err(e),
    }
}
