//! Verification suites: finite-difference checks of the eigenvalue calculus
//! and Monte Carlo checks of the Stein and Stein-Haff identities, reported
//! as rows of `(check, error, threshold)`.

use std::fmt;

use num_complex::Complex64 as C64;

use crate::calculus::{
    divergence_known, divergence_unknown_s, divergence_unknown_z, eig_derivs_known, eig_derivs_unknown_mgtp,
    eig_derivs_unknown_pgtm, fd_divergence_known, fd_divergence_unknown_s, fd_divergence_unknown_z,
    fd_eig_derivs_known, fd_eig_derivs_unknown_mgtp, fd_eig_derivs_unknown_pgtm, Comparison, FD_ABS_TOL,
    FD_GAP_GUARD, FD_REL_TOL,
};
use crate::cmatrix::CMatrix;
use crate::error::{Error, Result};
use crate::estimators::{make_profile, Branch, EstimatorKind, ShrinkageProfile};
use crate::risk::{
    stein_haff_check, stein_identity_check, ConstantField, IdentityCheck, IdentityField, IdentityMatrixField,
    LinearField, ScaledSField,
};
use crate::sampling::{sample_cwishart, RngStream};

/// Monte Carlo rows pass when `|lhs − rhs| ≤ MC_SIGMAS · se`.
pub const MC_SIGMAS: f64 = 3.0;

/// Instances drawn before giving up on finding well-separated spectra.
const MAX_DRAWS_PER_INSTANCE: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub check: String,
    pub error: f64,
    pub threshold: f64,
    pub pass: bool,
    /// Free-form context: sample sizes, rejected draws, the two sides.
    pub note: String,
}

impl SuiteRow {
    fn from_comparison(check: &str, cmp: &Comparison, note: String) -> Self {
        SuiteRow { check: check.into(), error: cmp.max_rel_error, threshold: cmp.threshold, pass: cmp.pass, note }
    }

    fn from_identity(check: &str, id: &IdentityCheck) -> Self {
        SuiteRow {
            check: check.into(),
            error: (id.lhs - id.rhs).abs(),
            threshold: MC_SIGMAS * id.se,
            pass: id.closes(MC_SIGMAS),
            note: format!("lhs {:.6}, rhs {:.6}", id.lhs, id.rhs),
        }
    }
}

/// All rows of a suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub rows: Vec<SuiteRow>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.check.len()).max().unwrap_or(5).max(5);
        writeln!(f, "{:<width$}  {:>12}  {:>12}  status  note", "check", "error", "threshold")?;
        for r in &self.rows {
            let status = if r.pass { "PASS" } else { "FAIL" };
            writeln!(f, "{:<width$}  {:>12.4e}  {:>12.4e}  {status:<6}  {}", r.check, r.error, r.threshold, r.note)?;
        }
        Ok(())
    }
}

/// Smooth non-coefficient profile used alongside the built-in ones.
fn smooth_profile(q: usize) -> ShrinkageProfile {
    ShrinkageProfile::custom_fn(
        q,
        |f| f.iter().map(|x| -1.0 / (1.0 + x)).collect(),
        |f| f.iter().map(|x| 1.0 / ((1.0 + x) * (1.0 + x))).collect(),
    )
}

struct Tally {
    name: &'static str,
    cmp: Comparison,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Tally { name, cmp: Comparison::empty(FD_REL_TOL) }
    }

    fn add(&mut self, rows: Vec<(&'static str, Comparison)>) {
        for (_, c) in rows {
            self.cmp = self.cmp.merge(c);
        }
    }

    fn add_scalar(&mut self, a: f64, b: f64) {
        self.cmp = self.cmp.merge(Comparison::scalar(a, b, FD_REL_TOL, FD_ABS_TOL));
    }
}

/// Compares closed-form eigen-derivatives and divergence traces with their
/// finite-difference oracles on `instances` random `(Z, S)` pairs.
///
/// The known-covariance rows use `Z` when `m ≥ p` and `Zᵀ` otherwise, since
/// `Z*Z` is singular for `p > m`. The unknown-covariance rows follow the
/// branch of `(m, p)` and are omitted when `m = p`. Draws whose relative
/// eigengap is below [`FD_GAP_GUARD`] are redrawn.
pub fn calculus_suite(m: usize, p: usize, seed: u64, step: f64, instances: usize) -> Result<SuiteReport> {
    if m == 0 || p == 0 || instances == 0 {
        return Err(Error::ConfigInvalid("m, p and instances must be positive".into()));
    }
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::ConfigInvalid(format!("fd step {step} must be positive")));
    }
    let branch = Branch::of(m, p).ok();
    let n = m.max(p) + 3;
    let mut rng = RngStream::new(seed, 0);
    let mut known_d = Tally::new("known eigen-derivatives");
    let mut known_div = Tally::new("known divergence");
    let (d_name, v_name) = match branch {
        Some(Branch::MGtP) => ("unknown eigen-derivatives (m > p)", "unknown divergences (m > p)"),
        _ => ("unknown eigen-derivatives (p > m)", "unknown divergences (p > m)"),
    };
    let mut unk_d = Tally::new(d_name);
    let mut unk_div = Tally::new(v_name);
    let mut rejected = 0usize;
    let mut accepted = 0usize;
    while accepted < instances {
        if rejected > MAX_DRAWS_PER_INSTANCE * instances {
            return Err(Error::DegenerateSpectrum(format!("{rejected} draws rejected by the eigengap guard")));
        }
        let z = rng.complex_normal_matrix(m, p);
        let s = sample_cwishart(&CMatrix::identity(p), n, &mut rng)?;
        let zk = if m >= p { z.clone() } else { z.transpose() };
        let known = match eig_derivs_known(&zk) {
            Ok(d) if d.eig.min_relative_gap() >= FD_GAP_GUARD => d,
            Ok(_) | Err(Error::DegenerateSpectrum(_)) => {
                rejected += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let unknown = match branch {
            Some(Branch::MGtP) => match eig_derivs_unknown_mgtp(&z, &s) {
                Ok(d) if d.sd.min_relative_gap() >= FD_GAP_GUARD => {
                    Some(d.compare(&fd_eig_derivs_unknown_mgtp(&z, &s, step)?, FD_REL_TOL, FD_ABS_TOL))
                }
                Ok(_) | Err(Error::DegenerateSpectrum(_)) => {
                    rejected += 1;
                    continue;
                }
                Err(e) => return Err(e),
            },
            Some(Branch::PGtM) => match eig_derivs_unknown_pgtm(&z, &s) {
                Ok(d) if d.eig.min_relative_gap() >= FD_GAP_GUARD => {
                    Some(d.compare(&fd_eig_derivs_unknown_pgtm(&z, &s, step)?, FD_REL_TOL, FD_ABS_TOL))
                }
                Ok(_) | Err(Error::DegenerateSpectrum(_)) => {
                    rejected += 1;
                    continue;
                }
                Err(e) => return Err(e),
            },
            None => None,
        };
        accepted += 1;
        known_d.add(known.compare(&fd_eig_derivs_known(&zk, step)?, FD_REL_TOL, FD_ABS_TOL));
        let (km, kp) = zk.shape();
        let mut known_profiles = vec![smooth_profile(kp)];
        if km > kp {
            known_profiles.push(make_profile(&EstimatorKind::KnownOrdered, km, kp, n)?);
        }
        for phi in &known_profiles {
            known_div.add_scalar(divergence_known(&zk, phi)?, fd_divergence_known(&zk, phi, step)?);
        }
        if let (Some(rows), Some(b)) = (unknown, branch) {
            unk_d.add(rows);
            for phi in [smooth_profile(m.min(p)), make_profile(&EstimatorKind::UnknownAs, m, p, n)?] {
                unk_div.add_scalar(divergence_unknown_z(&z, &s, &phi, b)?, fd_divergence_unknown_z(&z, &s, &phi, b, step)?);
                unk_div.add_scalar(divergence_unknown_s(&z, &s, &phi, b)?, fd_divergence_unknown_s(&z, &s, &phi, b, step)?);
            }
        }
    }
    let mut tallies = vec![known_d, known_div];
    if branch.is_some() {
        tallies.push(unk_d);
        tallies.push(unk_div);
    }
    let rows = tallies
        .into_iter()
        .map(|t| {
            let note = format!("{} values, {instances} instances, {rejected} redrawn", t.cmp.count);
            SuiteRow::from_comparison(t.name, &t.cmp, note)
        })
        .collect();
    Ok(SuiteReport { rows })
}

/// A random positive-definite matrix `I + A A* / p`.
fn random_pd(rng: &mut RngStream, p: usize) -> CMatrix {
    let a = rng.complex_normal_matrix(p, p);
    let aa = &a * &a.adjoint();
    &CMatrix::identity(p) + &aa.scale(1.0 / p as f64)
}

/// Stein identity for the identity field at `Σ = I, θ = 0` (both sides equal
/// `2p`), and for constant, identity and `Σ`-linear fields at a random
/// `(θ, Σ)`.
pub fn stein_suite(p: usize, reps: usize, seed: u64) -> Result<SuiteReport> {
    if p == 0 || reps < 2 {
        return Err(Error::ConfigInvalid("p must be positive and reps at least 2".into()));
    }
    let mut setup = RngStream::new(seed, u64::MAX);
    let sigma = random_pd(&mut setup, p);
    let theta: Vec<C64> = (0..p).map(|_| setup.complex_normal()).collect();
    let constant: Vec<C64> = (0..p).map(|_| setup.complex_normal()).collect();

    let mut rows = Vec::new();
    let mut rng = RngStream::new(seed, 0);
    let zero = vec![C64::new(0.0, 0.0); p];
    let id = stein_identity_check(&zero, &CMatrix::identity(p), &IdentityField, reps, &mut rng)?;
    let analytic = 2.0 * p as f64;
    rows.push(SuiteRow::from_identity("identity field, Σ = I", &id));
    rows.push(SuiteRow {
        check: "identity field, Σ = I, lhs vs 2p".into(),
        error: (id.lhs - analytic).abs(),
        threshold: MC_SIGMAS * id.se,
        pass: (id.lhs - analytic).abs() <= MC_SIGMAS * id.se && id.rhs == analytic,
        note: format!("lhs {:.6}, rhs {}, 2p = {analytic}", id.lhs, id.rhs),
    });
    let mut rng = RngStream::new(seed, 1);
    let c = stein_identity_check(&theta, &sigma, &ConstantField(constant), reps, &mut rng)?;
    rows.push(SuiteRow::from_identity("constant field", &c));
    let mut rng = RngStream::new(seed, 2);
    let i = stein_identity_check(&theta, &sigma, &IdentityField, reps, &mut rng)?;
    rows.push(SuiteRow::from_identity("identity field, random Σ", &i));
    let mut rng = RngStream::new(seed, 3);
    let l = stein_identity_check(&theta, &sigma, &LinearField(sigma.clone()), reps, &mut rng)?;
    rows.push(SuiteRow::from_identity("linear field Σz", &l));
    Ok(SuiteReport { rows })
}

/// Stein-Haff identity at `Σ = I`: `G = S`, whose right-hand side equals
/// `np` exactly, and `G = I`.
pub fn stein_haff_suite(p: usize, n: usize, reps: usize, seed: u64) -> Result<SuiteReport> {
    if p == 0 || reps < 2 {
        return Err(Error::ConfigInvalid("p must be positive and reps at least 2".into()));
    }
    if n <= p {
        return Err(Error::DegenerateSample(format!("n = {n} must exceed p = {p}")));
    }
    let sigma = CMatrix::identity(p);
    let np = (n * p) as f64;
    let mut rng = RngStream::new(seed, 0);
    let s = stein_haff_check(&sigma, n, &ScaledSField(1.0), reps, &mut rng)?;
    let mut rng = RngStream::new(seed, 1);
    let i = stein_haff_check(&sigma, n, &IdentityMatrixField, reps, &mut rng)?;
    let rows = vec![
        SuiteRow {
            check: "G = S, rhs vs np".into(),
            error: (s.rhs - np).abs(),
            threshold: 1e-12 * np,
            pass: (s.rhs - np).abs() <= 1e-12 * np,
            note: format!("rhs {}, np = {np}", s.rhs),
        },
        SuiteRow::from_identity("G = S", &s),
        SuiteRow::from_identity("G = I", &i),
    ];
    Ok(SuiteReport { rows })
}
