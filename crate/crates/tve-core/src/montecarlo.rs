//! Scenario execution: replication loops, quadrature truth values, and
//! metric aggregation for coverage, Type-I error, bias, and RMSE.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{simulate, DgdKind, DgdSpec};
use crate::error::{Result, TveError};
use crate::learners::{fit_nuisances, LearnerSpec};
use crate::numerics::{derive_stream, gauss_legendre_unit, pairwise_mean, sample_sd};
use crate::tmle::tmle_psi;
use crate::variance::{
    compute_report, confidence_interval, EstimatorKind, IterativeOptions, OneStepOptions,
    Termination,
};

const QUADRATURE_ORDER: usize = 64;

/// Tensor Gauss-Legendre integral of `f` over the unit cube.
pub fn integrate_unit_cube<F: Fn(&[f64; 3]) -> f64>(order: usize, f: F) -> f64 {
    let (x, w) = gauss_legendre_unit(order);
    let mut total = 0.0;
    for (i, &xi) in x.iter().enumerate() {
        for (j, &xj) in x.iter().enumerate() {
            let wij = w[i] * w[j];
            for (k, &xk) in x.iter().enumerate() {
                total += wij * w[k] * f(&[xi, xj, xk]);
            }
        }
    }
    total
}

/// True log risk ratio of a simulated distribution, by deterministic
/// quadrature of both treatment-specific means.
pub fn psi_truth(dgd: &DgdSpec) -> f64 {
    let e1 = integrate_unit_cube(QUADRATURE_ORDER, |w| dgd.outcome_prob(w, 1.0));
    let e0 = integrate_unit_cube(QUADRATURE_ORDER, |w| dgd.outcome_prob(w, 0.0));
    e1.ln() - e0.ln()
}

/// Variance plug-in at arbitrary true nuisance functions, by quadrature.
pub fn sigma2_plugin_quadrature<G, Q>(order: usize, g1: G, q: Q) -> f64
where
    G: Fn(&[f64; 3]) -> f64,
    Q: Fn(&[f64; 3], f64) -> f64,
{
    let psi1 = integrate_unit_cube(order, |w| q(w, 1.0));
    let psi0 = integrate_unit_cube(order, |w| q(w, 0.0));
    integrate_unit_cube(order, |w| {
        let q1 = q(w, 1.0);
        let q0 = q(w, 0.0);
        let g = g1(w);
        let contrast = q1 / psi1 - q0 / psi0;
        q1 * (1.0 - q1) / (psi1 * psi1 * g) + q0 * (1.0 - q0) / (psi0 * psi0 * (1.0 - g))
            + contrast * contrast
    })
}

/// Variance of the point-parameter influence function at the true
/// distribution. This is the primary oracle for bias and RMSE of the
/// variance estimators.
pub fn sigma2_quadrature(dgd: &DgdSpec) -> f64 {
    sigma2_plugin_quadrature(QUADRATURE_ORDER, |w| dgd.propensity(w), |w, a| dgd.outcome_prob(w, a))
}

/// The two oracle values for the variance parameter: the scaled Monte-Carlo
/// variance of the targeted point estimates, and the quadrature plug-in.
#[derive(Debug, Clone, Serialize)]
pub struct Sigma2Oracle {
    /// Sample variance of the point estimates across replications.
    pub mc_var_raw: f64,
    /// n times the sample variance; unit-compatible with the plug-in.
    pub mc_var_scaled: f64,
    /// Quadrature plug-in at the true nuisances.
    pub quadrature: f64,
    pub reps_used: usize,
    pub n_failed: usize,
}

/// Approximate the variance oracle by replicating the full estimation
/// pipeline (simulate, fit, target) and scaling the spread of the point
/// estimates; cross-checked against the quadrature plug-in.
pub fn sigma2_oracle(
    dgd: &DgdSpec,
    n: usize,
    reps: usize,
    seed: u64,
    learner: &LearnerSpec,
) -> Result<Sigma2Oracle> {
    if reps < 100 {
        return Err(TveError::InvalidSize(format!("oracle needs reps >= 100, got {reps}")));
    }
    let psi_hats: Vec<Option<f64>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let stream = derive_stream(seed, r as u64);
            let Ok((d, _)) = simulate(dgd, n, stream) else { return None };
            if !d.both_arms_present() {
                return None;
            }
            let Ok(fit0) = fit_nuisances(&d, learner, stream) else { return None };
            tmle_psi(&d, &fit0).ok().map(|pt| pt.psi_hat)
        })
        .collect();
    let usable: Vec<f64> = psi_hats.iter().flatten().copied().collect();
    let n_failed = reps - usable.len();
    if usable.len() < 2 {
        return Err(TveError::Scenario("oracle pipeline produced fewer than 2 usable replications".into()));
    }
    let sd = sample_sd(&usable);
    let raw = sd * sd;
    Ok(Sigma2Oracle {
        mc_var_raw: raw,
        mc_var_scaled: n as f64 * raw,
        quadrature: sigma2_quadrature(dgd),
        reps_used: usable.len(),
        n_failed,
    })
}

fn default_level() -> f64 {
    0.95
}

/// One Monte-Carlo scenario cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub dgd: DgdSpec,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub learner: LearnerSpec,
    #[serde(default = "default_level")]
    pub level: f64,
    pub estimators: Vec<EstimatorKind>,
    #[serde(default)]
    pub onestep: OneStepOptions,
    #[serde(default)]
    pub iterative: IterativeOptions,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(TveError::InvalidSize("reps must be >= 1".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(TveError::InvalidInput(format!("level {} outside (0, 1)", self.level)));
        }
        self.learner.validate(3)?;
        Ok(())
    }
}

/// Per-estimator pieces of one replication.
#[derive(Debug, Clone, Serialize)]
pub struct EstimatorRecord {
    pub sigma2: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub covered: bool,
    pub reject: bool,
}

/// One replication of a scenario. Failed replications carry a reason and no
/// estimates.
#[derive(Debug, Clone, Serialize)]
pub struct RepRecord {
    pub rep: usize,
    pub seed_stream: u64,
    pub psi_hat: Option<f64>,
    pub ic: Option<EstimatorRecord>,
    pub ss: Option<EstimatorRecord>,
    pub iterative: Option<EstimatorRecord>,
    pub onestep: Option<EstimatorRecord>,
    pub steps_os: Option<usize>,
    pub term_os: Option<Termination>,
    pub steps_it: Option<usize>,
    pub term_it: Option<Termination>,
    pub n_g_trunc: Option<usize>,
    pub n_q_trunc: Option<usize>,
    pub failed_reason: Option<String>,
}

impl RepRecord {
    pub fn estimator(&self, which: EstimatorKind) -> Option<&EstimatorRecord> {
        match which {
            EstimatorKind::Ic => self.ic.as_ref(),
            EstimatorKind::Ss => self.ss.as_ref(),
            EstimatorKind::Iterative => self.iterative.as_ref(),
            EstimatorKind::Onestep => self.onestep.as_ref(),
        }
    }

    fn failed(rep: usize, seed_stream: u64, reason: String) -> Self {
        Self {
            rep,
            seed_stream,
            psi_hat: None,
            ic: None,
            ss: None,
            iterative: None,
            onestep: None,
            steps_os: None,
            term_os: None,
            steps_it: None,
            term_it: None,
            n_g_trunc: None,
            n_q_trunc: None,
            failed_reason: Some(reason),
        }
    }
}

/// Aggregated metrics for one estimator within a scenario.
#[derive(Debug, Clone, Serialize)]
pub struct EstimatorSummary {
    pub coverage: f64,
    /// Rejection rate of the zero null; reported only for null scenarios.
    pub type1: Option<f64>,
    pub bias: f64,
    pub rmse: f64,
    pub mean_sigma2: f64,
}

/// Results of one scenario: truth values, per-estimator metrics, and the
/// per-replication table.
#[derive(Debug, Clone, Serialize)]
pub struct ScenarioResult {
    pub dgd: DgdSpec,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub level: f64,
    pub psi_truth: f64,
    pub sigma2_oracle: f64,
    pub estimators: Vec<EstimatorKind>,
    pub summaries: Vec<(EstimatorKind, EstimatorSummary)>,
    pub n_failed: usize,
    pub records: Vec<RepRecord>,
}

impl ScenarioResult {
    pub fn summary(&self, which: EstimatorKind) -> Option<&EstimatorSummary> {
        self.summaries.iter().find(|(k, _)| *k == which).map(|(_, s)| s)
    }
}

fn run_rep(cfg: &ScenarioConfig, rep: usize, psi_true: f64) -> RepRecord {
    let stream = derive_stream(cfg.seed, rep as u64);
    let (d, _) = match simulate(&cfg.dgd, cfg.n, stream) {
        Ok(v) => v,
        Err(e) => return RepRecord::failed(rep, stream, e.to_string()),
    };
    if !d.both_arms_present() {
        return RepRecord::failed(rep, stream, "single-arm".into());
    }
    let fit0 = match fit_nuisances(&d, &cfg.learner, stream) {
        Ok(f) => f,
        Err(e) => return RepRecord::failed(rep, stream, e.to_string()),
    };
    let pt = match tmle_psi(&d, &fit0) {
        Ok(p) => p,
        Err(e) => return RepRecord::failed(rep, stream, e.to_string()),
    };
    let report = match compute_report(&d, &fit0, &pt, &cfg.estimators, &cfg.onestep, &cfg.iterative) {
        Ok(r) => r,
        Err(e) => return RepRecord::failed(rep, stream, e.to_string()),
    };
    let make = |sigma2: f64| {
        let (ci_lo, ci_hi) = confidence_interval(pt.psi_hat, sigma2, cfg.n, cfg.level);
        EstimatorRecord {
            sigma2,
            ci_lo,
            ci_hi,
            covered: ci_lo <= psi_true && psi_true <= ci_hi,
            reject: !(ci_lo <= 0.0 && 0.0 <= ci_hi),
        }
    };
    RepRecord {
        rep,
        seed_stream: stream,
        psi_hat: Some(pt.psi_hat),
        ic: report.ic.map(make),
        ss: report.ss.map(make),
        iterative: report.iterative.as_ref().map(|f| make(f.sigma2)),
        onestep: report.onestep.as_ref().map(|f| make(f.sigma2)),
        steps_os: report.onestep.as_ref().map(|f| f.trace.steps),
        term_os: report.onestep.as_ref().map(|f| f.trace.termination),
        steps_it: report.iterative.as_ref().map(|f| f.trace.steps),
        term_it: report.iterative.as_ref().map(|f| f.trace.termination),
        n_g_trunc: Some(fit0.n_g_truncated),
        n_q_trunc: Some(fit0.n_q_truncated),
        failed_reason: None,
    }
}

/// Aggregate per-estimator metrics from replication records. Shared by the
/// in-process runner and the file-based report merger.
pub fn aggregate(
    records: &[RepRecord],
    estimators: &[EstimatorKind],
    beta_psi: f64,
    sigma2_oracle: f64,
) -> Vec<(EstimatorKind, EstimatorSummary)> {
    let mut out = Vec::new();
    for &kind in estimators {
        let mut covered = Vec::new();
        let mut rejected = Vec::new();
        let mut sigmas = Vec::new();
        for rec in records.iter().filter(|r| r.failed_reason.is_none()) {
            if let Some(er) = rec.estimator(kind) {
                covered.push(f64::from(u8::from(er.covered)));
                rejected.push(f64::from(u8::from(er.reject)));
                sigmas.push(er.sigma2);
            }
        }
        if sigmas.is_empty() {
            continue;
        }
        let mean_sigma2 = pairwise_mean(&sigmas);
        let sq_err: Vec<f64> = sigmas.iter().map(|&s| (s - sigma2_oracle) * (s - sigma2_oracle)).collect();
        out.push((
            kind,
            EstimatorSummary {
                coverage: pairwise_mean(&covered),
                type1: (beta_psi == 0.0).then(|| pairwise_mean(&rejected)),
                bias: mean_sigma2 - sigma2_oracle,
                rmse: pairwise_mean(&sq_err).sqrt(),
                mean_sigma2,
            },
        ));
    }
    out
}

/// Run every replication of a scenario. Replications execute in parallel on
/// the current rayon pool; each one draws from a stream keyed by
/// (seed, replication index) and the reduction is order-deterministic, so
/// results do not depend on the worker count.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioResult> {
    cfg.validate()?;
    let psi_true = psi_truth(&cfg.dgd);
    let sigma2_true = sigma2_quadrature(&cfg.dgd);
    let records: Vec<RepRecord> =
        (0..cfg.reps).into_par_iter().map(|r| run_rep(cfg, r, psi_true)).collect();
    let n_failed = records.iter().filter(|r| r.failed_reason.is_some()).count();
    if n_failed == cfg.reps {
        return Err(TveError::Scenario(format!("all {} replications failed", cfg.reps)));
    }
    let summaries = aggregate(&records, &cfg.estimators, cfg.dgd.beta_psi, sigma2_true);
    Ok(ScenarioResult {
        dgd: cfg.dgd,
        n: cfg.n,
        reps: cfg.reps,
        seed: cfg.seed,
        level: cfg.level,
        psi_truth: psi_true,
        sigma2_oracle: sigma2_true,
        estimators: cfg.estimators.clone(),
        summaries,
        n_failed,
        records,
    })
}

/// One row of the long-format summary table.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub dgd: DgdKind,
    pub beta_p: f64,
    pub beta_psi: f64,
    pub n: usize,
    pub estimator: EstimatorKind,
    pub reps: usize,
    pub n_failed: usize,
    pub coverage: f64,
    pub type1: Option<f64>,
    pub bias: f64,
    pub rmse: f64,
    pub mean_sigma2: f64,
    pub psi_truth: f64,
    pub sigma2_oracle: f64,
}

/// Flatten scenario results into a long-format table keyed by
/// (dgd, beta_p, beta_psi, n, estimator).
pub fn summarize(results: &[ScenarioResult]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for res in results {
        for (kind, s) in &res.summaries {
            rows.push(SummaryRow {
                dgd: res.dgd.kind,
                beta_p: res.dgd.beta_p,
                beta_psi: res.dgd.beta_psi,
                n: res.n,
                estimator: *kind,
                reps: res.reps,
                n_failed: res.n_failed,
                coverage: s.coverage,
                type1: s.type1,
                bias: s.bias,
                rmse: s.rmse,
                mean_sigma2: s.mean_sigma2,
                psi_truth: res.psi_truth,
                sigma2_oracle: res.sigma2_oracle,
            });
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::variance::ALL_ESTIMATORS;

    fn simple(beta_p: f64, beta_psi: f64) -> DgdSpec {
        DgdSpec::new(DgdKind::Simple, beta_p, beta_psi).unwrap()
    }

    #[test]
    fn psi_truth_is_zero_under_the_null() {
        assert_eq!(psi_truth(&simple(-1.0, 0.0)), 0.0);
        assert_eq!(psi_truth(&DgdSpec::new(DgdKind::Complex, 0.5, 0.0).unwrap()), 0.0);
    }

    #[test]
    fn psi_truth_matches_monte_carlo() {
        use rand::{Rng, SeedableRng};
        let dgd = simple(0.0, 0.5);
        let truth = psi_truth(&dgd);
        // Independent Monte-Carlo oracle over 10^7 covariate draws.
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(55);
        let m = 10_000_000usize;
        let mut s1 = 0.0;
        let mut s0 = 0.0;
        for _ in 0..m {
            let w = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
            s1 += dgd.outcome_prob(&w, 1.0);
            s0 += dgd.outcome_prob(&w, 0.0);
        }
        let mc = (s1 / m as f64).ln() - (s0 / m as f64).ln();
        // Integrand values live in (0.5, 0.7); the MC standard error of each
        // mean is ~0.06/sqrt(m), and the log contrast roughly doubles it.
        let se = 3.0 * 0.12 / (m as f64).sqrt();
        assert!((truth - mc).abs() <= se, "quadrature {truth} vs MC {mc}");
    }

    #[test]
    fn psi_truth_is_monotone_in_effect_size() {
        let lo = psi_truth(&simple(0.0, 0.5));
        let hi = psi_truth(&simple(0.0, 2.0));
        assert!(hi > lo && lo > 0.0);
    }

    #[test]
    fn psi_truth_quadrature_is_converged() {
        let dgd = simple(0.5, 2.0);
        let coarse = {
            let e1 = integrate_unit_cube(64, |w| dgd.outcome_prob(w, 1.0));
            let e0 = integrate_unit_cube(64, |w| dgd.outcome_prob(w, 0.0));
            e1.ln() - e0.ln()
        };
        let fine = {
            let e1 = integrate_unit_cube(96, |w| dgd.outcome_prob(w, 1.0));
            let e0 = integrate_unit_cube(96, |w| dgd.outcome_prob(w, 0.0));
            e1.ln() - e0.ln()
        };
        assert!((coarse - fine).abs() < 1e-10);
    }

    #[test]
    fn sigma2_quadrature_is_four_for_constant_nuisances() {
        let v = sigma2_plugin_quadrature(16, |_| 0.5, |_, _| 0.5);
        assert!((v - 4.0).abs() < 1e-12);
    }

    #[test]
    fn positivity_violation_inflates_the_oracle_variance() {
        let lo = sigma2_quadrature(&simple(-2.0, 0.0));
        let hi = sigma2_quadrature(&simple(0.5, 0.0));
        assert!(hi > lo, "sigma2 at beta_p=0.5 ({hi}) should exceed beta_p=-2 ({lo})");
    }

    fn small_config(beta_p: f64, beta_psi: f64, n: usize, reps: usize, seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            dgd: simple(beta_p, beta_psi),
            n,
            reps,
            seed,
            learner: LearnerSpec::default_for(3),
            level: 0.95,
            estimators: ALL_ESTIMATORS.to_vec(),
            onestep: OneStepOptions::default(),
            iterative: IterativeOptions::default(),
        }
    }

    #[test]
    fn run_scenario_is_deterministic() {
        let cfg = small_config(-1.0, 0.5, 120, 24, 7);
        let r1 = run_scenario(&cfg).unwrap();
        let r2 = run_scenario(&cfg).unwrap();
        assert_eq!(r1.n_failed, r2.n_failed);
        for (a, b) in r1.records.iter().zip(&r2.records) {
            assert_eq!(a.psi_hat, b.psi_hat);
            assert_eq!(a.seed_stream, b.seed_stream);
            assert_eq!(
                a.onestep.as_ref().map(|e| e.sigma2),
                b.onestep.as_ref().map(|e| e.sigma2)
            );
        }
        for ((k1, s1), (k2, s2)) in r1.summaries.iter().zip(&r2.summaries) {
            assert_eq!(k1, k2);
            assert_eq!(s1.coverage, s2.coverage);
            assert_eq!(s1.rmse, s2.rmse);
        }
    }

    #[test]
    fn exclusion_accounting_is_exact() {
        let cfg = small_config(0.5, 0.0, 60, 40, 3);
        let res = run_scenario(&cfg).unwrap();
        let usable = res.records.iter().filter(|r| r.failed_reason.is_none()).count();
        assert_eq!(usable + res.n_failed, cfg.reps);
        // Coverage denominators: every usable record carries every estimator.
        for rec in res.records.iter().filter(|r| r.failed_reason.is_none()) {
            for kind in ALL_ESTIMATORS {
                assert!(rec.estimator(kind).is_some());
            }
        }
    }

    #[test]
    fn type1_is_complement_of_coverage_under_exact_null() {
        // With beta_psi = 0 the truth is exactly 0, so covering the truth and
        // failing to reject the zero null are the same event.
        let cfg = small_config(0.0, 0.0, 100, 30, 11);
        let res = run_scenario(&cfg).unwrap();
        for (_, s) in &res.summaries {
            let t1 = s.type1.expect("null scenario must report type1");
            assert!((t1 - (1.0 - s.coverage)).abs() < 1e-12);
        }
    }

    #[test]
    fn type1_absent_when_effect_is_nonzero() {
        let cfg = small_config(0.0, 0.5, 100, 10, 13);
        let res = run_scenario(&cfg).unwrap();
        for (_, s) in &res.summaries {
            assert!(s.type1.is_none());
        }
    }

    #[test]
    fn empty_estimator_subset_is_allowed() {
        let mut cfg = small_config(0.0, 0.0, 80, 5, 17);
        cfg.estimators = vec![];
        let res = run_scenario(&cfg).unwrap();
        assert!(res.summaries.is_empty());
        assert!(summarize(&[res]).is_empty());
    }

    #[test]
    fn summarize_copies_single_result_verbatim() {
        let cfg = small_config(-1.0, 0.0, 100, 12, 19);
        let res = run_scenario(&cfg).unwrap();
        let rows = summarize(std::slice::from_ref(&res));
        assert_eq!(rows.len(), res.summaries.len());
        for (row, (kind, s)) in rows.iter().zip(&res.summaries) {
            assert_eq!(row.estimator, *kind);
            assert_eq!(row.coverage, s.coverage);
            assert_eq!(row.bias, s.bias);
            assert_eq!(row.n, 100);
        }
    }

    #[test]
    fn different_seeds_agree_within_monte_carlo_error() {
        let r1 = run_scenario(&small_config(-1.0, 0.0, 200, 150, 100)).unwrap();
        let r2 = run_scenario(&small_config(-1.0, 0.0, 200, 150, 200)).unwrap();
        for kind in ALL_ESTIMATORS {
            let c1 = r1.summary(kind).unwrap().coverage;
            let c2 = r2.summary(kind).unwrap().coverage;
            // Coverage is ~0.95; 150 reps give se ~ 0.018, allow 4 se.
            assert!((c1 - c2).abs() < 4.0 * 0.018 * 2.0_f64.sqrt(), "{kind}: {c1} vs {c2}");
        }
    }

    /// The two oracle definitions agree at a moderate scale; the acceptance
    /// suite re-checks at the full scale.
    #[test]
    fn oracle_definitions_are_coherent() {
        let dgd = simple(-2.0, 0.0);
        let o = sigma2_oracle(&dgd, 500, 250, 77, &LearnerSpec::default_for(3)).unwrap();
        // MC se of a sample variance of R normal-ish draws: var * sqrt(2/(R-1)).
        let se = o.mc_var_scaled * (2.0 / (o.reps_used as f64 - 1.0)).sqrt();
        assert!(
            (o.mc_var_scaled - o.quadrature).abs() <= 3.0 * se,
            "scaled MC {} vs quadrature {} (3se = {})",
            o.mc_var_scaled,
            o.quadrature,
            3.0 * se
        );
        assert!((o.mc_var_raw * 500.0 - o.mc_var_scaled).abs() < 1e-12);
    }

    #[test]
    fn oracle_requires_enough_reps() {
        let dgd = simple(-2.0, 0.0);
        assert!(matches!(
            sigma2_oracle(&dgd, 100, 50, 1, &LearnerSpec::default_for(3)),
            Err(TveError::InvalidSize(_))
        ));
    }
}
