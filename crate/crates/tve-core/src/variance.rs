//! The four variance estimators for the log risk ratio: the empirical
//! influence-function variance, the non-targeted substitution plug-in, an
//! iteratively targeted plug-in, and a one-step targeted plug-in driven by a
//! universal least favorable submodel.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::Dataset;
use crate::eif::{
    clever_covariates_by_arm, eif_psi, mean_square, moments, sigma2_integrand_at, sigma2_plugin,
};
use crate::error::Result;
use crate::learners::{fit_logistic_with_fallback, NuisanceFit};
use crate::numerics::{expit, logit, pairwise_mean, sample_sd};
use crate::tmle::PsiTarget;

/// Default micro-step of the one-step flow.
pub const DEFAULT_D_EPS: f64 = 0.001;
/// Default micro-step cap (total |epsilon| range 10 at the default step).
pub const DEFAULT_MAX_MICRO_STEPS: usize = 10_000;
/// Default round cap of the iterative update.
pub const DEFAULT_MAX_ROUNDS: usize = 100;

/// Why a targeting flow stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    /// The estimating-equation residual met the stopping threshold.
    Solved,
    /// A candidate update failed to decrease the empirical loss.
    LossIncreased,
    /// The step cap was reached first.
    MaxIter,
    /// The initial estimates already met the threshold; nothing moved.
    AlreadySolved,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Termination::Solved => "solved",
            Termination::LossIncreased => "loss-increased",
            Termination::MaxIter => "max-iter",
            Termination::AlreadySolved => "already-solved",
        };
        write!(f, "{s}")
    }
}

/// Diagnostic record of a targeting flow. `loss_path` and `pn_eif_path` hold
/// one entry per retained state (initial state included), so both have
/// `steps + 1` entries; `eps_path` holds the signed parameter increment of
/// each retained step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowTrace {
    pub steps: usize,
    pub loss_path: Vec<f64>,
    pub pn_eif_path: Vec<f64>,
    pub eps_path: Vec<f64>,
    pub termination: Termination,
    /// Signed accumulated fluctuation parameter.
    pub epsilon_total: f64,
}

/// A targeted variance estimate together with its trace and the final
/// nuisance values, so the stopping contract can be re-checked externally.
#[derive(Debug, Clone)]
pub struct FlowResult {
    pub sigma2: f64,
    pub trace: FlowTrace,
    pub fit: NuisanceFit,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OneStepOptions {
    /// Largest allowed micro-step.
    pub d_eps: f64,
    pub max_iter: usize,
}

impl Default for OneStepOptions {
    fn default() -> Self {
        Self { d_eps: DEFAULT_D_EPS, max_iter: DEFAULT_MAX_MICRO_STEPS }
    }
}

/// Probability guard applied inside targeting flows. This is a numerical
/// floor only; it keeps logits finite without imposing the statistical
/// truncation box, which would freeze boundary units and break the
/// submodel's score identity mid-flow.
const FLOW_PROB_GUARD: f64 = 1e-9;

fn guard_expit(logit_value: f64) -> f64 {
    expit(logit_value).clamp(FLOW_PROB_GUARD, 1.0 - FLOW_PROB_GUARD)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IterativeOptions {
    pub max_rounds: usize,
}

impl Default for IterativeOptions {
    fn default() -> Self {
        Self { max_rounds: DEFAULT_MAX_ROUNDS }
    }
}

/// Empirical mean of the summed outcome- and treatment-model log losses.
pub fn empirical_loss(fit: &NuisanceFit, d: &Dataset) -> f64 {
    let n = d.n();
    let mut per_unit = Vec::with_capacity(n);
    for i in 0..n {
        let (a, y) = (d.a()[i], d.y()[i]);
        let q = if a == 1.0 { fit.qbar1[i] } else { fit.qbar0[i] }.clamp(1e-12, 1.0 - 1e-12);
        let g1 = fit.g1[i].clamp(1e-12, 1.0 - 1e-12);
        let l1 = -(y * q.ln() + (1.0 - y) * (1.0 - q).ln());
        let l2 = -(a * g1.ln() + (1.0 - a) * (1.0 - g1).ln());
        per_unit.push(l1 + l2);
    }
    pairwise_mean(&per_unit)
}

/// One evaluation of the targeting state: estimating-equation residual,
/// threshold scale, and the clever covariates at both treatment arms.
struct FlowEval {
    pn: f64,
    sd: f64,
    h_q1: Array1<f64>,
    h_q0: Array1<f64>,
    h_g: Array1<f64>,
}

fn evaluate_flow(fit: &NuisanceFit, d: &Dataset) -> Result<FlowEval> {
    let m = moments(fit)?;
    let (h_q1, h_q0, h_g) = clever_covariates_by_arm(fit, &m);
    let n = d.n();
    let mut targetable = Vec::with_capacity(n);
    let mut integrand = Vec::with_capacity(n);
    for i in 0..n {
        let (a, y) = (d.a()[i], d.y()[i]);
        let d_qbar = if a == 1.0 {
            h_q1[i] * (y - fit.qbar1[i])
        } else {
            h_q0[i] * (y - fit.qbar0[i])
        };
        let d_g = h_g[i] * (a - fit.g1[i]);
        targetable.push(d_qbar + d_g);
        integrand.push(sigma2_integrand_at(fit.qbar1[i], fit.qbar0[i], fit.g1[i], &m));
    }
    let pn = pairwise_mean(&targetable);
    let integrand_mean = pairwise_mean(&integrand);
    // Full influence value; the covariate-marginal part is empirically
    // centered, so it contributes spread but not mean.
    let full: Vec<f64> =
        (0..n).map(|i| integrand[i] - integrand_mean + targetable[i]).collect();
    Ok(FlowEval { pn, sd: sample_sd(&full), h_q1, h_q0, h_g })
}

fn stop_threshold(sd: f64, n: usize) -> f64 {
    sd / ((n as f64).sqrt() * (n as f64).ln())
}

/// Empirical variance of the estimated point-parameter influence function,
/// evaluated at the targeted estimates.
pub fn var_ic(d: &Dataset, pt: &PsiTarget) -> Result<f64> {
    let m = moments(&pt.fit_star)?;
    Ok(mean_square(&eif_psi(&pt.fit_star, &m, d)))
}

/// Non-targeted substitution estimator: the variance plug-in at the initial
/// estimates.
pub fn var_ss(fit0: &NuisanceFit) -> Result<f64> {
    let m = moments(fit0)?;
    Ok(sigma2_plugin(fit0, &m))
}

/// Largest relative discrepancy tolerated between a retained step's realized
/// loss derivative and the estimating equation it discretizes. Half the
/// verification budget, so checked traces pass with margin.
const STEP_FIDELITY: f64 = 0.005;
/// Below this residual magnitude the fidelity check is waived and a step
/// only has to decrease the loss.
const FIDELITY_FLOOR: f64 = 0.01;

/// One-step targeted estimator. Integrates the universal least favorable
/// submodel: at each micro-step the moments and clever covariates are
/// recomputed and the logits of both nuisance functions move by
/// `sign(Pn) * step * h`, the direction along the submodel in which the
/// empirical loss decreases. The step starts at `d_eps` and halves until the
/// realized loss derivative matches `Pn[D]` to within 0.5% (the submodel's
/// defining property), so every retained step is a certified first-order
/// move along the flow. Stops when the residual meets `sd / (sqrt(n) ln n)`,
/// when no admissible step can decrease the loss, or at `max_iter`.
pub fn var_onestep(d: &Dataset, fit0: &NuisanceFit, opts: &OneStepOptions) -> Result<FlowResult> {
    let n = d.n();
    let mut fit = fit0.clone();
    let mut cur_loss = empirical_loss(&fit, d);
    let mut loss_path = vec![cur_loss];
    let mut pn_path = Vec::new();
    let mut eps_path = Vec::new();
    let mut steps = 0usize;
    let mut epsilon_total = 0.0;
    let mut step_start = opts.d_eps;
    let termination = loop {
        let ev = evaluate_flow(&fit, d)?;
        pn_path.push(ev.pn);
        if ev.pn.abs() <= stop_threshold(ev.sd, n) {
            break if steps == 0 { Termination::AlreadySolved } else { Termination::Solved };
        }
        if steps >= opts.max_iter {
            break Termination::MaxIter;
        }
        let s = if ev.pn > 0.0 { 1.0 } else { -1.0 };
        let mut accepted = None;
        let mut h_step = step_start;
        for _ in 0..60 {
            let mut cand = fit.clone();
            for i in 0..n {
                cand.qbar1[i] = guard_expit(logit(cand.qbar1[i]) + s * h_step * ev.h_q1[i]);
                cand.qbar0[i] = guard_expit(logit(cand.qbar0[i]) + s * h_step * ev.h_q0[i]);
                cand.g1[i] = guard_expit(logit(cand.g1[i]) + s * h_step * ev.h_g[i]);
            }
            let new_loss = empirical_loss(&cand, d);
            let fd = (new_loss - cur_loss) / (s * (-h_step));
            let faithful = ev.pn.abs() <= FIDELITY_FLOOR || (fd - ev.pn).abs() <= STEP_FIDELITY * ev.pn.abs();
            if new_loss < cur_loss && faithful {
                accepted = Some((cand, new_loss, h_step));
                break;
            }
            h_step *= 0.5;
        }
        let Some((cand, new_loss, h_step)) = accepted else {
            // Even a microscopic move cannot decrease the loss faithfully;
            // the retained state is the flow's end point.
            break Termination::LossIncreased;
        };
        fit = cand;
        cur_loss = new_loss;
        loss_path.push(cur_loss);
        eps_path.push(-s * h_step);
        epsilon_total -= s * h_step;
        steps += 1;
        // Let the step size recover gradually after halvings.
        step_start = (h_step * 2.0).min(opts.d_eps);
    };
    let m = moments(&fit)?;
    let sigma2 = sigma2_plugin(&fit, &m);
    Ok(FlowResult {
        sigma2,
        trace: FlowTrace { steps, loss_path, pn_eif_path: pn_path, eps_path, termination, epsilon_total },
        fit,
    })
}

/// Iteratively targeted estimator. Each round fits scalar fluctuations for
/// the outcome regression (response Y, covariate -h_qbar, offset the current
/// logit) and the propensity (response A, covariate -h_g), applies both
/// updates at the counterfactual arms, and repeats until the stopping
/// threshold, the round cap, or two failed loss decreases.
pub fn var_iterative(d: &Dataset, fit0: &NuisanceFit, opts: &IterativeOptions) -> Result<FlowResult> {
    let n = d.n();
    let mut fit = fit0.clone();
    let mut cur_loss = empirical_loss(&fit, d);
    let mut loss_path = vec![cur_loss];
    let mut pn_path = Vec::new();
    let mut eps_path = Vec::new();
    let mut rounds = 0usize;
    let mut epsilon_total = 0.0;
    let mut loss_failures = 0usize;
    let mut cached: Option<FlowEval> = None;
    let termination = loop {
        let ev = match cached.take() {
            Some(e) => e,
            None => {
                let e = evaluate_flow(&fit, d)?;
                pn_path.push(e.pn);
                e
            }
        };
        if ev.pn.abs() <= stop_threshold(ev.sd, n) {
            break if rounds == 0 { Termination::AlreadySolved } else { Termination::Solved };
        }
        if rounds >= opts.max_rounds {
            break Termination::MaxIter;
        }
        // Scalar offset fluctuations; the covariate enters negated to match
        // the submodel sign convention, so logits update by -eps * h.
        let mut x_q = Array2::zeros((n, 1));
        let mut off_q = Array1::zeros(n);
        let mut x_g = Array2::zeros((n, 1));
        let mut off_g = Array1::zeros(n);
        for i in 0..n {
            if d.a()[i] == 1.0 {
                x_q[[i, 0]] = -ev.h_q1[i];
                off_q[i] = logit(fit.qbar1[i]);
            } else {
                x_q[[i, 0]] = -ev.h_q0[i];
                off_q[i] = logit(fit.qbar0[i]);
            }
            x_g[[i, 0]] = -ev.h_g[i];
            off_g[i] = logit(fit.g1[i]);
        }
        let eps_q = fit_logistic_with_fallback(&x_q, d.y(), Some(&off_q))?[0];
        let eps_g = fit_logistic_with_fallback(&x_g, d.a(), Some(&off_g))?[0];
        let mut cand = fit.clone();
        for i in 0..n {
            cand.qbar1[i] = guard_expit(logit(cand.qbar1[i]) - eps_q * ev.h_q1[i]);
            cand.qbar0[i] = guard_expit(logit(cand.qbar0[i]) - eps_q * ev.h_q0[i]);
            cand.g1[i] = guard_expit(logit(cand.g1[i]) - eps_g * ev.h_g[i]);
        }
        let new_loss = empirical_loss(&cand, d);
        if !(new_loss < cur_loss) {
            loss_failures += 1;
            if loss_failures >= 2 {
                break Termination::LossIncreased;
            }
            // Keep the state; the deterministic refit will reproduce the
            // same candidate, confirming the oscillation before stopping.
            cached = Some(ev);
            continue;
        }
        fit = cand;
        cur_loss = new_loss;
        loss_path.push(cur_loss);
        eps_path.push(eps_q + eps_g);
        epsilon_total += eps_q + eps_g;
        rounds += 1;
    };
    let m = moments(&fit)?;
    let sigma2 = sigma2_plugin(&fit, &m);
    Ok(FlowResult {
        sigma2,
        trace: FlowTrace { steps: rounds, loss_path, pn_eif_path: pn_path, eps_path, termination, epsilon_total },
        fit,
    })
}

/// Two-sided Wald interval for the point estimate.
pub fn confidence_interval(psi_hat: f64, sigma2: f64, n: usize, level: f64) -> (f64, f64) {
    assert!(sigma2 >= 0.0, "variance must be nonnegative");
    assert!(n >= 1, "n must be positive");
    assert!(level > 0.0 && level < 1.0, "level must be in (0, 1)");
    let z = Normal::new(0.0, 1.0).unwrap().inverse_cdf(0.5 + level / 2.0);
    let half = z * (sigma2 / n as f64).sqrt();
    (psi_hat - half, psi_hat + half)
}

/// Which variance estimators to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Ic,
    Ss,
    Iterative,
    Onestep,
}

pub const ALL_ESTIMATORS: [EstimatorKind; 4] =
    [EstimatorKind::Ic, EstimatorKind::Ss, EstimatorKind::Iterative, EstimatorKind::Onestep];

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            EstimatorKind::Ic => "ic",
            EstimatorKind::Ss => "ss",
            EstimatorKind::Iterative => "iterative",
            EstimatorKind::Onestep => "onestep",
        };
        write!(f, "{s}")
    }
}

/// The requested variance estimates for one dataset.
#[derive(Debug, Clone, Default)]
pub struct VarianceReport {
    pub ic: Option<f64>,
    pub ss: Option<f64>,
    pub iterative: Option<FlowResult>,
    pub onestep: Option<FlowResult>,
}

impl VarianceReport {
    pub fn value(&self, which: EstimatorKind) -> Option<f64> {
        match which {
            EstimatorKind::Ic => self.ic,
            EstimatorKind::Ss => self.ss,
            EstimatorKind::Iterative => self.iterative.as_ref().map(|f| f.sigma2),
            EstimatorKind::Onestep => self.onestep.as_ref().map(|f| f.sigma2),
        }
    }
}

/// Run the requested estimators on one dataset.
pub fn compute_report(
    d: &Dataset,
    fit0: &NuisanceFit,
    pt: &PsiTarget,
    which: &[EstimatorKind],
    os_opts: &OneStepOptions,
    it_opts: &IterativeOptions,
) -> Result<VarianceReport> {
    let mut report = VarianceReport::default();
    for kind in which {
        match kind {
            EstimatorKind::Ic => report.ic = Some(var_ic(d, pt)?),
            EstimatorKind::Ss => report.ss = Some(var_ss(fit0)?),
            EstimatorKind::Iterative => report.iterative = Some(var_iterative(d, fit0, it_opts)?),
            EstimatorKind::Onestep => report.onestep = Some(var_onestep(d, fit0, os_opts)?),
        }
    }
    Ok(report)
}
