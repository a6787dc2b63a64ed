//! Monte Carlo risk experiments.
//!
//! Replicate `r` draws `(Z, S)` from stream `(seed, r)`, so results do not
//! depend on how replicates are scheduled across threads. Per-replicate
//! values are collected in replicate order and reduced serially.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cmatrix::{herm_pd_inverse, inv_sqrt_herm, sqrt_herm, CMatrix};
use crate::error::{Error, Result};
use crate::estimators::{
    apply_h_known, apply_h_unknown, make_profile, Covariance, EstimatorKind, EstimatorSpec, ShrinkageProfile,
};
use crate::risk::{ure_known, ure_unknown};
use crate::sampling::{ModelParams, ModelSampler, RngStream};
use crate::stats::MeanSe;

pub const DEFAULT_GAP_THRESHOLD: f64 = 1e-8;
pub const MIN_REPS: usize = 100;

/// How the mean matrix is chosen. It is fixed across replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum XiSpec {
    Zero,
    Literal {
        matrix: CMatrix,
    },
    /// Entries drawn once from a standard complex normal, times `scale`.
    /// The draw uses `sub_seed` when given, the experiment seed otherwise.
    ScaledRandom {
        scale: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sub_seed: Option<u64>,
    },
}

impl XiSpec {
    pub fn mode_name(&self) -> &'static str {
        match self {
            XiSpec::Zero => "zero",
            XiSpec::Literal { .. } => "literal",
            XiSpec::ScaledRandom { .. } => "scaled_random",
        }
    }

    /// Scale reported alongside results: 0 for `zero`, 1 for `literal`.
    pub fn scale(&self) -> f64 {
        match self {
            XiSpec::Zero => 0.0,
            XiSpec::Literal { .. } => 1.0,
            XiSpec::ScaledRandom { scale, .. } => *scale,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IdentityTag {
    #[serde(rename = "identity")]
    Identity,
}

/// A covariance given as `"identity"` or as a matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovSpec {
    Named(IdentityTag),
    Matrix(CMatrix),
}

impl Default for CovSpec {
    fn default() -> Self {
        CovSpec::Named(IdentityTag::Identity)
    }
}

impl CovSpec {
    pub fn resolve(&self, dim: usize) -> CMatrix {
        match self {
            CovSpec::Named(IdentityTag::Identity) => CMatrix::identity(dim),
            CovSpec::Matrix(m) => m.clone(),
        }
    }

    pub fn is_identity(&self, dim: usize) -> bool {
        match self {
            CovSpec::Named(_) => true,
            CovSpec::Matrix(m) => *m == CMatrix::identity(dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub m: usize,
    pub p: usize,
    pub n: usize,
    pub xi: XiSpec,
    #[serde(default)]
    pub sigma: CovSpec,
    #[serde(default)]
    pub k: CovSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// `Tr{(Ξ̂ − Ξ)*(Ξ̂ − Ξ)}`.
    Known,
    /// `Tr{Σ⁻¹ (Ξ̂ − Ξ)* K⁻¹ (Ξ̂ − Ξ)}`.
    Invariant,
}

fn default_gap_threshold() -> f64 {
    DEFAULT_GAP_THRESHOLD
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub estimators: Vec<EstimatorSpec>,
    pub reps: usize,
    pub seed: u64,
    pub loss: LossKind,
    #[serde(default = "default_gap_threshold")]
    pub gap_threshold: f64,
}

impl ExperimentConfig {
    /// Checks everything that can be checked before sampling.
    pub fn validate(&self) -> Result<()> {
        let invalid = |msg: String| Err(Error::ConfigInvalid(msg));
        let ModelSpec { m, p, n, .. } = self.model;
        if self.estimators.is_empty() {
            return invalid("estimator list is empty".into());
        }
        if self.reps < MIN_REPS {
            return invalid(format!("reps = {} is below the minimum {MIN_REPS}", self.reps));
        }
        if !(self.gap_threshold >= 0.0 && self.gap_threshold.is_finite()) {
            return invalid(format!("gap_threshold = {} must be finite and non-negative", self.gap_threshold));
        }
        if m == 0 || p == 0 {
            return invalid("m and p must be positive".into());
        }
        if n <= p {
            return invalid(format!("n = {n} must exceed p = {p}"));
        }
        match &self.model.xi {
            XiSpec::Literal { matrix } if matrix.shape() != (m, p) => {
                return invalid(format!("xi matrix is {:?}, expected ({m}, {p})", matrix.shape()));
            }
            XiSpec::ScaledRandom { scale, .. } if !scale.is_finite() => {
                return invalid(format!("xi scale {scale} is not finite"));
            }
            _ => {}
        }
        for spec in &self.estimators {
            spec.check_dims(m, p)
                .map_err(|e| Error::ConfigInvalid(format!("estimator {}: {e}", spec.id())))?;
        }
        self.model_params().map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        Ok(())
    }

    /// Resolves the mean matrix and covariances.
    pub fn model_params(&self) -> Result<ModelParams> {
        let ModelSpec { m, p, n, .. } = self.model;
        let xi = match &self.model.xi {
            XiSpec::Zero => CMatrix::zeros(m, p),
            XiSpec::Literal { matrix } => matrix.clone(),
            XiSpec::ScaledRandom { scale, sub_seed } => {
                // the last stream index is never used by a replicate
                let mut rng = RngStream::new(sub_seed.unwrap_or(self.seed), u64::MAX);
                rng.complex_normal_matrix(m, p).scale(*scale)
            }
        };
        ModelParams::new(n, xi, self.model.sigma.resolve(p), self.model.k.resolve(m))
    }

    /// Whether the risk estimates are unbiased for the configured loss:
    /// always under the invariant loss, under the plain loss only when both
    /// covariances are the identity.
    pub fn ure_matches_loss(&self) -> bool {
        self.loss == LossKind::Invariant
            || (self.model.sigma.is_identity(self.model.p) && self.model.k.is_identity(self.model.m))
    }
}

/// Aggregated result for one estimator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskReport {
    pub estimator_id: String,
    pub m: usize,
    pub p: usize,
    pub n: usize,
    pub xi_mode: String,
    pub xi_scale: f64,
    pub reps_used: usize,
    pub discarded: usize,
    pub empirical_risk: f64,
    pub risk_se: f64,
    pub ure_mean: f64,
    pub ure_se: f64,
    /// `m·p`, the risk of the unbiased estimator `Z`.
    pub baseline: f64,
}

impl RiskReport {
    /// `|ure_mean − empirical_risk| ≤ k·√(ure_se² + risk_se²)`.
    pub fn ure_consistent(&self, k: f64) -> bool {
        let se = (self.ure_se * self.ure_se + self.risk_se * self.risk_se).sqrt();
        (self.ure_mean - self.empirical_risk).abs() <= k * se
    }

    /// `empirical_risk ≤ baseline + k·risk_se`.
    pub fn within_baseline(&self, k: f64) -> bool {
        self.empirical_risk <= self.baseline + k * self.risk_se
    }

    /// `empirical_risk < baseline − k·risk_se`.
    pub fn beats_baseline(&self, k: f64) -> bool {
        self.empirical_risk < self.baseline - k * self.risk_se
    }
}

/// Per-replicate outcome of one estimator: `None` when discarded.
type Outcome = Option<(f64, f64)>;

struct Prepared {
    spec: EstimatorSpec,
    profile: ShrinkageProfile,
}

struct Transforms {
    k_inv_half: CMatrix,
    k_half: CMatrix,
    sigma_inv_half: CMatrix,
    sigma_half: CMatrix,
    sigma_inv: CMatrix,
    k_inv: CMatrix,
}

fn is_discard(e: &Error) -> bool {
    matches!(e, Error::DegenerateSpectrum(_) | Error::DegenerateSample(_))
}

/// Runs the experiment; one report per estimator, in configuration order.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RiskReport>> {
    config.validate()?;
    let params = config.model_params()?;
    let (m, p, n) = (params.m, params.p, params.n);
    let sampler = ModelSampler::new(params.clone())?;
    let tr = Transforms {
        k_inv_half: inv_sqrt_herm(&params.k)?,
        k_half: sqrt_herm(&params.k)?,
        sigma_inv_half: inv_sqrt_herm(&params.sigma)?,
        sigma_half: sqrt_herm(&params.sigma)?,
        sigma_inv: herm_pd_inverse(&params.sigma)?,
        k_inv: herm_pd_inverse(&params.k)?,
    };
    let prepared: Vec<Prepared> = config
        .estimators
        .iter()
        .map(|spec| {
            let profile = make_profile(&spec.kind, m, p, n)?;
            Ok(Prepared { spec: spec.clone(), profile })
        })
        .collect::<Result<_>>()?;
    let ure_defined = config.ure_matches_loss();

    let per_rep: Vec<Vec<Outcome>> = (0..config.reps)
        .into_par_iter()
        .map(|r| replicate(config, &sampler, &tr, &prepared, r as u64))
        .collect::<Result<_>>()?;

    let xi_mode = config.model.xi.mode_name().to_string();
    let xi_scale = config.model.xi.scale();
    Ok(prepared
        .iter()
        .enumerate()
        .map(|(e, prep)| {
            let used: Vec<(f64, f64)> = per_rep.iter().filter_map(|row| row[e]).collect();
            let losses: Vec<f64> = used.iter().map(|x| x.0).collect();
            let ures: Vec<f64> = used.iter().map(|x| x.1).collect();
            let risk = MeanSe::from_samples(&losses);
            let (ure_mean, ure_se) = if ure_defined {
                let u = MeanSe::from_samples(&ures);
                (u.mean, u.se)
            } else {
                (f64::NAN, f64::NAN)
            };
            RiskReport {
                estimator_id: prep.spec.id().to_string(),
                m,
                p,
                n,
                xi_mode: xi_mode.clone(),
                xi_scale,
                reps_used: used.len(),
                discarded: config.reps - used.len(),
                empirical_risk: risk.mean,
                risk_se: risk.se,
                ure_mean,
                ure_se,
                baseline: (m * p) as f64,
            }
        })
        .collect())
}

fn replicate(
    config: &ExperimentConfig,
    sampler: &ModelSampler,
    tr: &Transforms,
    prepared: &[Prepared],
    r: u64,
) -> Result<Vec<Outcome>> {
    let params = sampler.params();
    let mut rng = RngStream::new(config.seed, r);
    let (z, s) = match sampler.sample_pair(&mut rng) {
        Ok(pair) => pair,
        Err(e) if is_discard(&e) => return Ok(vec![None; prepared.len()]),
        Err(e) => return Err(e),
    };
    let mp = (params.m * params.p) as f64;
    prepared
        .iter()
        .map(|prep| {
            let res = evaluate(&prep.spec, &prep.profile, &z, &s, params.n, tr, config.gap_threshold, mp);
            match res {
                Ok(Some((xi_hat, ure))) => {
                    let d = &xi_hat - &params.xi;
                    let loss = match config.loss {
                        LossKind::Known => d.norm_sqr(),
                        LossKind::Invariant => (&tr.sigma_inv * &(&(&d.adjoint() * &tr.k_inv) * &d)).trace().re,
                    };
                    if loss.is_finite() && ure.is_finite() {
                        Ok(Some((loss, ure)))
                    } else {
                        Ok(None)
                    }
                }
                Ok(None) => Ok(None),
                Err(e) if is_discard(&e) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Estimate and risk estimate for one replicate; `None` when the risk
/// estimate is flagged degenerate.
#[allow(clippy::too_many_arguments)]
fn evaluate(
    spec: &EstimatorSpec,
    profile: &ShrinkageProfile,
    z: &CMatrix,
    s: &CMatrix,
    n: usize,
    tr: &Transforms,
    gap_threshold: f64,
    mp: f64,
) -> Result<Option<(CMatrix, f64)>> {
    if let EstimatorKind::Mle = spec.kind {
        return Ok(Some((z.clone(), mp)));
    }
    let zk = &tr.k_inv_half * z;
    match spec.covariance {
        Covariance::Known => {
            let w = &zk * &tr.sigma_inv_half;
            let ure = ure_known(&w, profile, gap_threshold)?;
            if ure.degenerate_flag {
                return Ok(None);
            }
            let est = apply_h_known(&w, profile)?;
            Ok(Some((&(&tr.k_half * &est) * &tr.sigma_half, ure.value)))
        }
        Covariance::Unknown => {
            let ure = ure_unknown(&zk, s, n, profile, gap_threshold)?;
            if ure.degenerate_flag {
                return Ok(None);
            }
            let est = apply_h_unknown(&zk, s, profile)?;
            Ok(Some((&tr.k_half * &est, ure.value)))
        }
    }
}

pub const CSV_HEADER: [&str; 13] = [
    "estimator_id",
    "m",
    "p",
    "n",
    "xi_mode",
    "xi_scale",
    "reps_used",
    "discarded",
    "empirical_risk",
    "risk_se",
    "ure_mean",
    "ure_se",
    "baseline",
];

pub fn write_report_csv(reports: &[RiskReport], path: impl AsRef<Path>) -> Result<()> {
    let io = |e: csv::Error| Error::Io(e.to_string());
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(io)?;
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in reports {
        w.write_record([
            r.estimator_id.clone(),
            r.m.to_string(),
            r.p.to_string(),
            r.n.to_string(),
            r.xi_mode.clone(),
            r.xi_scale.to_string(),
            r.reps_used.to_string(),
            r.discarded.to_string(),
            r.empirical_risk.to_string(),
            r.risk_se.to_string(),
            r.ure_mean.to_string(),
            r.ure_se.to_string(),
            r.baseline.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Deserializes JSON, reporting the offending field path on failure.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        Error::ConfigParse(format!("at `{path}`: {inner}"))
    })
}

pub fn parse_config_json(text: &str) -> Result<ExperimentConfig> {
    parse_json(text)
}

pub fn read_config_json(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_config_json(&text).map_err(|e| match e {
        Error::ConfigParse(msg) => Error::ConfigParse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_config_json(config: &ExperimentConfig, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(config).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}
