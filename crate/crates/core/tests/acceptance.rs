//! End-to-end acceptance checks. Each check prints one PASS/FAIL line; the
//! process exits non-zero if any check fails.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use cshrink::calculus::{
    divergence_known, divergence_unknown_s, divergence_unknown_z, eig_derivs_known, eig_derivs_unknown_mgtp,
    eig_derivs_unknown_pgtm, fd_divergence_known, fd_divergence_unknown_s, fd_divergence_unknown_z,
    fd_eig_derivs_known, fd_eig_derivs_unknown_mgtp, fd_eig_derivs_unknown_pgtm, unknown_z_field, Comparison,
    DEFAULT_FD_STEP, FD_ABS_TOL, FD_GAP_GUARD, FD_REL_TOL,
};
use cshrink::cmatrix::min_relative_gap;
use cshrink::estimators::{
    as_coefficients, em_coefficient, make_profile, unknown_gamma_bound, Branch, EstimatorKind,
    EstimatorSpec, GammaSpec, ShrinkageProfile,
};
use cshrink::harness::{
    read_config_json, run_experiment, write_report_csv, CovSpec, ExperimentConfig, LossKind, ModelSpec, XiSpec,
    DEFAULT_GAP_THRESHOLD,
};
use cshrink::risk::{
    delta_hat, delta_hat_arguments, known_increment, stein_haff_check, stein_identity_check, ure_general,
    ure_unknown, ConstantField, IdentityField, IdentityMatrixField, LinearField, ScaledSField,
};
use cshrink::sampling::{sample_cwishart, RngStream};
use cshrink::{CMatrix, C64};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: String) -> Self {
        Outcome { pass, detail }
    }
}

fn report(id: usize, name: &str, out: &Outcome, elapsed: Duration) -> bool {
    let status = if out.pass { "PASS" } else { "FAIL" };
    println!("{status} [{id:>2}] {name}: {} ({:.1}s)", out.detail, elapsed.as_secs_f64());
    out.pass
}

const SHAPES: [(usize, usize); 4] = [(4, 2), (5, 3), (2, 4), (3, 5)];
const INSTANCES: usize = 50;

fn sorted_desc(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| b.partial_cmp(a).unwrap());
    v
}

/// `γ_k(f) = c_k f_k / (f_k + d)` with `c` descending, which keeps `γ`
/// ordered, nondecreasing in `f_k`, and below `max(c)`.
fn saturating_gamma(c: Vec<f64>, d: f64) -> GammaSpec {
    let c2 = c.clone();
    GammaSpec {
        gamma: Arc::new(move |f: &[f64]| f.iter().zip(&c).map(|(f, c)| c * f / (f + d)).collect()),
        gamma_deriv: Arc::new(move |f: &[f64]| f.iter().zip(&c2).map(|(f, c)| c * d / ((f + d) * (f + d))).collect()),
    }
}

fn smooth_profile(q: usize) -> ShrinkageProfile {
    ShrinkageProfile::custom_fn(
        q,
        |f| f.iter().map(|x| -1.0 / (1.0 + x)).collect(),
        |f| f.iter().map(|x| 1.0 / ((1.0 + x) * (1.0 + x))).collect(),
    )
}

struct CalculusTotals {
    derivs: Comparison,
    divergences: Comparison,
    rejected: usize,
    failures: Vec<String>,
}

/// Checks 1 and 2 share their instances.
fn calculus_suite() -> CalculusTotals {
    let mut derivs = Comparison::empty(FD_REL_TOL);
    let mut divergences = Comparison::empty(FD_REL_TOL);
    let mut rejected = 0;
    let mut failures = Vec::new();
    let div_abs = 0.0;
    let step = DEFAULT_FD_STEP;
    for (shape_idx, &(m, p)) in SHAPES.iter().enumerate() {
        let mut rng = RngStream::new(1000 + shape_idx as u64, 0);
        let n = m.max(p) + 3;
        let mut accepted = 0;
        while accepted < INSTANCES {
            let z = rng.complex_normal_matrix(m, p);
            let s = sample_cwishart(&CMatrix::identity(p), n, &mut rng).unwrap();
            // known-covariance calculus needs at least as many rows as columns
            let zk = if m > p { z.clone() } else { z.transpose() };
            let known = match eig_derivs_known(&zk) {
                Ok(d) if d.eig.min_relative_gap() >= FD_GAP_GUARD => d,
                _ => {
                    rejected += 1;
                    continue;
                }
            };
            let branch = Branch::of(m, p).unwrap();
            let unknown_rows = match branch {
                Branch::MGtP => match eig_derivs_unknown_mgtp(&z, &s) {
                    Ok(d) if d.sd.min_relative_gap() >= FD_GAP_GUARD => {
                        let fd = fd_eig_derivs_unknown_mgtp(&z, &s, step).unwrap();
                        d.compare(&fd, FD_REL_TOL, FD_ABS_TOL)
                    }
                    _ => {
                        rejected += 1;
                        continue;
                    }
                },
                Branch::PGtM => match eig_derivs_unknown_pgtm(&z, &s) {
                    Ok(d) if d.eig.min_relative_gap() >= FD_GAP_GUARD => {
                        let fd = fd_eig_derivs_unknown_pgtm(&z, &s, step).unwrap();
                        d.compare(&fd, FD_REL_TOL, FD_ABS_TOL)
                    }
                    _ => {
                        rejected += 1;
                        continue;
                    }
                },
            };
            accepted += 1;
            let fd_known = fd_eig_derivs_known(&zk, step).unwrap();
            for (name, cmp) in known.compare(&fd_known, FD_REL_TOL, FD_ABS_TOL).into_iter().chain(unknown_rows) {
                if !cmp.pass {
                    failures.push(format!("{m}x{p} {name}: {:.2e}", cmp.max_rel_error));
                }
                derivs = derivs.merge(cmp);
            }

            let q = m.min(p);
            let (km, kp) = zk.shape();
            for phi in [smooth_profile(kp), make_profile(&EstimatorKind::KnownOrdered, km, kp, n).unwrap()] {
                let a = divergence_known(&zk, &phi).unwrap();
                let b = fd_divergence_known(&zk, &phi, step).unwrap();
                let cmp = Comparison::scalar(a, b, FD_REL_TOL, div_abs);
                if !cmp.pass {
                    failures.push(format!("{m}x{p} known divergence: {a} vs {b}"));
                }
                divergences = divergences.merge(cmp);
            }
            for phi in [smooth_profile(q), make_profile(&EstimatorKind::UnknownAs, m, p, n).unwrap()] {
                let a = divergence_unknown_z(&z, &s, &phi, branch).unwrap();
                let b = fd_divergence_unknown_z(&z, &s, &phi, branch, step).unwrap();
                let cz = Comparison::scalar(a, b, FD_REL_TOL, div_abs);
                let a2 = divergence_unknown_s(&z, &s, &phi, branch).unwrap();
                let b2 = fd_divergence_unknown_s(&z, &s, &phi, branch, step).unwrap();
                let cs = Comparison::scalar(a2, b2, FD_REL_TOL, div_abs);
                if !cz.pass || !cs.pass {
                    failures.push(format!("{m}x{p} unknown divergence: z {a} vs {b}, s {a2} vs {b2}"));
                }
                divergences = divergences.merge(cz).merge(cs);
            }
        }
    }
    CalculusTotals { derivs, divergences, rejected, failures }
}

fn check_stein() -> Outcome {
    let reps = 100_000;
    let mut rng = RngStream::new(3000, 0);
    let c = C64::new;
    let zero = [c(0.0, 0.0), c(0.0, 0.0)];
    let id = stein_identity_check(&zero, &CMatrix::identity(2), &IdentityField, reps, &mut rng).unwrap();
    let id_analytic = (id.lhs - 4.0).abs() <= 3.0 * id.se && id.rhs == 4.0;
    let sigma = CMatrix::from_vec(3, 3, vec![
        c(2.0, 0.0), c(0.4, 0.3), c(0.0, -0.2),
        c(0.4, -0.3), c(1.5, 0.0), c(0.1, 0.0),
        c(0.0, 0.2), c(0.1, 0.0), c(1.0, 0.0),
    ])
    .unwrap();
    let theta = [c(1.0, -0.5), c(-2.0, 0.25), c(0.0, 1.0)];
    let cst = stein_identity_check(&theta, &sigma, &ConstantField(vec![c(1.0, -2.0), c(0.5, 0.0), c(0.0, 3.0)]), reps, &mut rng)
        .unwrap();
    let lin = stein_identity_check(&theta, &sigma, &LinearField(sigma.clone()), reps, &mut rng).unwrap();
    let idg = stein_identity_check(&theta, &sigma, &IdentityField, reps, &mut rng).unwrap();
    let pass = id_analytic && id.closes(3.0) && cst.closes(3.0) && lin.closes(3.0) && idg.closes(3.0);
    Outcome::new(
        pass,
        format!(
            "identity(Σ=I,p=2) lhs={:.4} rhs={} se={:.4}; constant |d|/se={:.2}; linear |d|/se={:.2}; identity(Σ) |d|/se={:.2}",
            id.lhs,
            id.rhs,
            id.se,
            (cst.lhs - cst.rhs).abs() / cst.se,
            (lin.lhs - lin.rhs).abs() / lin.se,
            (idg.lhs - idg.rhs).abs() / idg.se,
        ),
    )
}

fn check_stein_haff() -> Outcome {
    let mut rng = RngStream::new(4000, 0);
    let (n, p) = (8, 2);
    let sigma = CMatrix::identity(p);
    let s_field = stein_haff_check(&sigma, n, &ScaledSField(1.0), 100_000, &mut rng).unwrap();
    let np = (n * p) as f64;
    let exact = (s_field.rhs - np).abs() <= 1e-12 * np;
    // the right-hand side is constant, so the paired se is the se of the left
    let lhs_ok = (s_field.lhs - np).abs() <= 3.0 * s_field.se;
    let id = stein_haff_check(&sigma, n, &IdentityMatrixField, 100_000, &mut rng).unwrap();
    Outcome::new(
        exact && lhs_ok && id.closes(3.0),
        format!(
            "G=S rhs={} (np={np}) lhs={:.4}; G=I lhs={} rhs={:.4} se={:.4}",
            s_field.rhs, s_field.lhs, id.lhs, id.rhs, id.se
        ),
    )
}

fn experiment(m: usize, p: usize, n: usize, xi: XiSpec, kinds: Vec<EstimatorKind>, reps: usize, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        model: ModelSpec { m, p, n, xi, sigma: CovSpec::default(), k: CovSpec::default() },
        estimators: kinds.into_iter().map(EstimatorSpec::of).collect(),
        reps,
        seed,
        loss: LossKind::Invariant,
        gap_threshold: DEFAULT_GAP_THRESHOLD,
    }
}

fn xi_at(scale: f64) -> XiSpec {
    if scale == 0.0 {
        XiSpec::Zero
    } else {
        XiSpec::ScaledRandom { scale, sub_seed: Some(77) }
    }
}

fn check_ure_unbiased() -> Outcome {
    let reps = 10_000;
    let mut pass = true;
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    let cases: Vec<(usize, usize, usize, Vec<EstimatorKind>)> = vec![
        (6, 2, 10, vec![EstimatorKind::KnownCrudeEm, EstimatorKind::KnownOrdered, EstimatorKind::UnknownEm, EstimatorKind::UnknownAs]),
        (2, 6, 10, vec![EstimatorKind::UnknownEm, EstimatorKind::UnknownAs]),
    ];
    for (ci, (m, p, n, kinds)) in cases.into_iter().enumerate() {
        for (si, scale) in [0.0, 1.0].into_iter().enumerate() {
            let cfg = experiment(m, p, n, xi_at(scale), kinds.clone(), reps, 5000 + 10 * ci as u64 + si as u64);
            for r in run_experiment(&cfg).unwrap() {
                let se = (r.ure_se.powi(2) + r.risk_se.powi(2)).sqrt();
                let z = (r.ure_mean - r.empirical_risk).abs() / se;
                worst = worst.max(z);
                let ok = r.ure_consistent(3.0) && r.reps_used > 0;
                if !ok {
                    lines.push(format!("{} {m}x{p} scale {scale}: ure {} risk {}", r.estimator_id, r.ure_mean, r.empirical_risk));
                }
                pass &= ok;
            }
        }
    }
    Outcome::new(pass, format!("worst |ure - risk| / combined se = {worst:.2}{}", failure_suffix(&lines)))
}

fn failure_suffix(lines: &[String]) -> String {
    if lines.is_empty() {
        String::new()
    } else {
        format!("; {}", lines.join("; "))
    }
}

fn check_minimax() -> Outcome {
    let reps = 10_000;
    let mut pass = true;
    let mut lines = Vec::new();
    let mut worst: f64 = f64::NEG_INFINITY;
    let known_gamma = || EstimatorKind::KnownGamma(saturating_gamma(vec![7.0, 5.0], 2.0));
    let unknown_gamma = |m, p, n| {
        let b = unknown_gamma_bound(m, p, n);
        EstimatorKind::UnknownGamma(saturating_gamma(vec![0.9 * b, 0.6 * b], 1.0))
    };
    let cases: Vec<(usize, usize, usize, Vec<EstimatorKind>)> = vec![
        (
            6,
            2,
            10,
            vec![
                EstimatorKind::KnownCrudeEm,
                EstimatorKind::KnownOrdered,
                known_gamma(),
                EstimatorKind::UnknownEm,
                EstimatorKind::UnknownAs,
                unknown_gamma(6, 2, 10),
            ],
        ),
        (2, 6, 10, vec![EstimatorKind::UnknownEm, EstimatorKind::UnknownAs, unknown_gamma(2, 6, 10)]),
    ];
    let mut beats = true;
    for (ci, (m, p, n, kinds)) in cases.into_iter().enumerate() {
        for (si, scale) in [0.0, 1.0, 10.0].into_iter().enumerate() {
            let cfg = experiment(m, p, n, xi_at(scale), kinds.clone(), reps, 6000 + 10 * ci as u64 + si as u64);
            for r in run_experiment(&cfg).unwrap() {
                worst = worst.max((r.empirical_risk - r.baseline) / r.risk_se);
                if !r.within_baseline(3.0) {
                    pass = false;
                    lines.push(format!("{} {m}x{p} scale {scale}: risk {} se {}", r.estimator_id, r.empirical_risk, r.risk_se));
                }
                let must_beat = scale == 0.0 && (m, p, n) == (6, 2, 10) && matches!(r.estimator_id.as_str(), "unknown_em" | "unknown_as");
                if must_beat && !r.beats_baseline(3.0) {
                    beats = false;
                    lines.push(format!("{} does not beat mp at Ξ=0: risk {} se {}", r.estimator_id, r.empirical_risk, r.risk_se));
                }
            }
        }
    }
    Outcome::new(pass && beats, format!("max (risk - mp) / se = {worst:.2}{}", failure_suffix(&lines)))
}

fn random_spectrum(rng: &mut RngStream, q: usize) -> Vec<f64> {
    loop {
        // log-uniform over five decades
        let f = sorted_desc((0..q).map(|_| 10f64.powf(5.0 * rng.uniform() - 2.0)).collect());
        if min_relative_gap(&f) > 1e-6 {
            return f;
        }
    }
}

fn random_descending(rng: &mut RngStream, q: usize, bound: f64) -> Vec<f64> {
    sorted_desc((0..q).map(|_| bound * (0.02 + 0.96 * rng.uniform())).collect())
}

fn check_pointwise_sign() -> Outcome {
    let configs = 1000;
    let mut rng = RngStream::new(7000, 0);
    let mut worst = [f64::NEG_INFINITY; 4];
    let mut violations = [0usize; 4];
    for _ in 0..configs {
        // known-covariance γ class and ordered coefficients, m > p
        let p = 1 + (rng.next_u64() % 6) as usize;
        let m = p + 1 + (rng.next_u64() % 6) as usize;
        let l = random_spectrum(&mut rng, p);
        let bound = 2.0 * (m - p) as f64;
        let d = 10f64.powf(4.0 * rng.uniform() - 2.0);
        let g = saturating_gamma(random_descending(&mut rng, p, bound), d);
        let prof = ShrinkageProfile::gamma(p, g.gamma, g.gamma_deriv, bound);
        let v = known_increment(m, p, &l, &prof).unwrap();
        worst[0] = worst[0].max(v);
        violations[0] += (v > 0.0) as usize;
        let ord = make_profile(&EstimatorKind::KnownOrdered, m, p, m + 1).unwrap();
        let v = known_increment(m, p, &l, &ord).unwrap();
        worst[1] = worst[1].max(v);
        violations[1] += (v > 0.0) as usize;

        // unknown-covariance γ class and AS coefficients, either branch
        let (m, p) = loop {
            let m = 1 + (rng.next_u64() % 7) as usize;
            let p = 1 + (rng.next_u64() % 7) as usize;
            if m != p {
                break (m, p);
            }
        };
        let n = m.max(p) + 1 + (rng.next_u64() % 10) as usize;
        let q = m.min(p);
        let f = random_spectrum(&mut rng, q);
        let (nn, mm, pp) = delta_hat_arguments(n, m, p).unwrap();
        let bound = unknown_gamma_bound(m, p, n);
        let d = 10f64.powf(4.0 * rng.uniform() - 2.0);
        let g = saturating_gamma(random_descending(&mut rng, q, bound), d);
        let prof = ShrinkageProfile::gamma(q, g.gamma, g.gamma_deriv, bound);
        let v = delta_hat(nn, mm, pp, &f, &prof).unwrap();
        worst[2] = worst[2].max(v);
        violations[2] += (v > 0.0) as usize;
        let as_prof = make_profile(&EstimatorKind::UnknownAs, m, p, n).unwrap();
        let v = delta_hat(nn, mm, pp, &f, &as_prof).unwrap();
        worst[3] = worst[3].max(v);
        violations[3] += (v > 0.0) as usize;
    }
    Outcome::new(
        violations.iter().all(|&v| v == 0),
        format!(
            "{configs} configs each; max increment: known γ {:.3e}, known ordered {:.3e}, unknown γ {:.3e}, unknown AS {:.3e}; positives {violations:?}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

fn check_ure_oracle() -> Outcome {
    let mut rng = RngStream::new(8000, 0);
    let mut cmp = Comparison::empty(1e-4);
    let mut per_branch = [0usize; 2];
    for (bi, (m, p, n)) in [(5usize, 3usize, 8usize), (2, 5, 8)].into_iter().enumerate() {
        while per_branch[bi] < 20 {
            let z = rng.complex_normal_matrix(m, p);
            let s = sample_cwishart(&CMatrix::identity(p), n, &mut rng).unwrap();
            let kind = if per_branch[bi] % 2 == 0 { EstimatorKind::UnknownAs } else { EstimatorKind::UnknownEm };
            let prof = make_profile(&kind, m, p, n).unwrap();
            let closed = match ure_unknown(&z, &s, n, &prof, FD_GAP_GUARD) {
                Ok(u) if !u.degenerate_flag => u.value,
                _ => continue,
            };
            let general = ure_general(&z, &s, n, |zz, ss| unknown_z_field(zz, ss, &prof), DEFAULT_FD_STEP).unwrap();
            cmp.push(C64::new(closed, 0.0), C64::new(general, 0.0), 1e-4, 0.0);
            per_branch[bi] += 1;
        }
    }
    Outcome::new(cmp.pass, format!("{} instances, max relative error {:.2e} (threshold 1e-4)", cmp.count, cmp.max_rel_error))
}

fn check_hand_values() -> Outcome {
    let prof = ShrinkageProfile::coefficients(vec![1.0 / 3.0]);
    let dh = delta_hat(5, 3, 1, &[2.0], &prof).unwrap();
    let as1 = as_coefficients(5, 2, 6)[0];
    let em = em_coefficient(6, 3, 8).unwrap();
    let pass = (dh + 1.0 / 3.0).abs() <= 1e-12 && (as1 - 5.0 / 6.0).abs() <= 1e-12 && (em - 3.0 / 11.0).abs() <= 1e-12;
    Outcome::new(pass, format!("delta_hat = {dh:.15}, AS c_1 = {as1:.15}, EM c = {em:.15}"))
}

fn check_determinism() -> Outcome {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/example.json");
    let cfg = read_config_json(&path).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    write_report_csv(&run_experiment(&cfg).unwrap(), &a).unwrap();
    write_report_csv(&run_experiment(&cfg).unwrap(), &b).unwrap();
    let (ba, bb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    Outcome::new(ba == bb && !ba.is_empty(), format!("{} bytes, identical = {}", ba.len(), ba == bb))
}

/// Id, name, body, and an optional wall-clock limit.
type Check = (usize, &'static str, fn() -> Outcome, Option<Duration>);

fn main() {
    // `cargo test -- --list` and filters are not meaningful here
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut all = true;

    let t = Instant::now();
    let calc = calculus_suite();
    let elapsed = t.elapsed();
    let d = &calc.derivs;
    let out = Outcome::new(
        d.pass && elapsed < Duration::from_secs(60),
        format!(
            "{} entries over {INSTANCES} instances per shape ({} rejected by the gap guard), max rel error {:.2e}, threshold {:.0e}{}",
            d.count,
            calc.rejected,
            d.max_rel_error,
            d.threshold,
            failure_suffix(&calc.failures)
        ),
    );
    all &= report(1, "eigen-derivatives vs finite differences", &out, elapsed);
    let v = &calc.divergences;
    let out = Outcome::new(v.pass, format!("{} divergences, max rel error {:.2e}", v.count, v.max_rel_error));
    all &= report(2, "divergence closed forms vs finite differences", &out, elapsed);

    let checks: [Check; 8] = [
        (3, "Stein identity", check_stein, None),
        (4, "Stein-Haff identity", check_stein_haff, None),
        (5, "risk estimate unbiasedness", check_ure_unbiased, Some(Duration::from_secs(300))),
        (6, "minimaxity and dominance", check_minimax, None),
        (7, "pointwise increment sign", check_pointwise_sign, None),
        (8, "closed-form vs finite-difference risk estimate", check_ure_oracle, None),
        (9, "hand values", check_hand_values, None),
        (10, "determinism of the shipped config", check_determinism, None),
    ];
    for (id, name, f, limit) in checks {
        let t = Instant::now();
        let mut out = f();
        let elapsed = t.elapsed();
        if let Some(limit) = limit {
            if elapsed >= limit {
                out.pass = false;
                out.detail.push_str(&format!("; exceeded {}s", limit.as_secs()));
            }
        }
        all &= report(id, name, &out, elapsed);
    }
    if !all {
        std::process::exit(1);
    }
}
