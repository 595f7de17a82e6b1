//! Initial estimation of the outcome regression and the propensity score:
//! an IRLS logistic core plus a discrete cross-validated selector over a
//! small library of logistic specifications.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Result, TveError};
use crate::numerics::{expit, solve_spd, splitmix64};

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_FOLDS: usize = 10;
/// Default truncation boxes for the fitted nuisances.
pub const DEFAULT_G_BOUNDS: (f64, f64) = (0.025, 0.975);
pub const DEFAULT_Q_BOUNDS: (f64, f64) = (0.001, 0.999);
/// Ridge penalty used when a maximum-likelihood fit separates.
pub const SEPARATION_RIDGE: f64 = 1e-2;
/// Coefficient magnitude treated as divergence.
const BETA_DIVERGENCE: f64 = 30.0;
/// Jitter added to the normal equations for numerical stability.
const SOLVE_JITTER: f64 = 1e-8;

/// One logistic model formula: which covariate columns enter, whether the
/// treatment indicator enters, and whether pairwise interactions and squares
/// of the listed covariates are added.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormulaSpec {
    pub covariates: Vec<usize>,
    #[serde(default)]
    pub include_treatment: bool,
    #[serde(default)]
    pub interactions: bool,
}

impl FormulaSpec {
    pub fn intercept_only() -> Self {
        Self { covariates: vec![], include_treatment: false, interactions: false }
    }

    pub fn main_terms(p: usize, include_treatment: bool) -> Self {
        Self { covariates: (0..p).collect(), include_treatment, interactions: false }
    }

    pub fn with_interactions(p: usize, include_treatment: bool) -> Self {
        Self { covariates: (0..p).collect(), include_treatment, interactions: true }
    }

    /// The deliberately wrong outcome formula: treatment and first covariate only.
    pub fn misspecified_outcome() -> Self {
        Self { covariates: vec![0], include_treatment: true, interactions: false }
    }

    pub fn describe(&self) -> String {
        let mut parts = Vec::new();
        if self.include_treatment {
            parts.push("A".to_string());
        }
        for &j in &self.covariates {
            parts.push(format!("W{}", j + 1));
        }
        if self.interactions {
            parts.push("inter+sq".to_string());
        }
        if parts.is_empty() {
            "intercept-only".to_string()
        } else {
            parts.join("+")
        }
    }

    fn n_columns(&self) -> usize {
        let c = self.covariates.len();
        let mut k = 1 + c + usize::from(self.include_treatment);
        if self.interactions {
            k += c * (c - 1) / 2 + c;
        }
        k
    }

    fn validate(&self, p: usize) -> Result<()> {
        if let Some(&j) = self.covariates.iter().find(|&&j| j >= p) {
            return Err(TveError::InvalidInput(format!(
                "formula references covariate index {j} but the dataset has p={p}"
            )));
        }
        Ok(())
    }
}

/// How the treatment column is filled when building a design matrix.
#[derive(Clone, Copy)]
enum TreatmentColumn {
    Observed,
    Fixed(f64),
}

fn build_design(spec: &FormulaSpec, d: &Dataset, treatment: TreatmentColumn) -> Array2<f64> {
    let n = d.n();
    let mut x = Array2::zeros((n, spec.n_columns()));
    for i in 0..n {
        let mut k = 0;
        x[[i, k]] = 1.0;
        k += 1;
        if spec.include_treatment {
            x[[i, k]] = match treatment {
                TreatmentColumn::Observed => d.a()[i],
                TreatmentColumn::Fixed(v) => v,
            };
            k += 1;
        }
        for &j in &spec.covariates {
            x[[i, k]] = d.w()[[i, j]];
            k += 1;
        }
        if spec.interactions {
            for (u, &j1) in spec.covariates.iter().enumerate() {
                for &j2 in &spec.covariates[u + 1..] {
                    x[[i, k]] = d.w()[[i, j1]] * d.w()[[i, j2]];
                    k += 1;
                }
            }
            for &j in &spec.covariates {
                x[[i, k]] = d.w()[[i, j]] * d.w()[[i, j]];
                k += 1;
            }
        }
    }
    x
}

/// Candidate libraries and fitting controls for the initial estimates.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerSpec {
    pub q_specs: Vec<FormulaSpec>,
    pub g_specs: Vec<FormulaSpec>,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default)]
    pub misspecify_q: bool,
    #[serde(default = "default_g_bounds")]
    pub g_bounds: (f64, f64),
    #[serde(default = "default_q_bounds")]
    pub q_bounds: (f64, f64),
}

fn default_folds() -> usize {
    DEFAULT_FOLDS
}
fn default_g_bounds() -> (f64, f64) {
    DEFAULT_G_BOUNDS
}
fn default_q_bounds() -> (f64, f64) {
    DEFAULT_Q_BOUNDS
}

impl LearnerSpec {
    /// The stock three-candidate library for a dataset with `p` covariates:
    /// intercept-only, main terms, and main terms plus pairwise interactions
    /// and squares, for both the outcome and the treatment model.
    pub fn default_for(p: usize) -> Self {
        Self {
            q_specs: vec![
                FormulaSpec::intercept_only(),
                FormulaSpec::main_terms(p, true),
                FormulaSpec::with_interactions(p, true),
            ],
            g_specs: vec![
                FormulaSpec::intercept_only(),
                FormulaSpec::main_terms(p, false),
                FormulaSpec::with_interactions(p, false),
            ],
            folds: DEFAULT_FOLDS,
            misspecify_q: false,
            g_bounds: DEFAULT_G_BOUNDS,
            q_bounds: DEFAULT_Q_BOUNDS,
        }
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if self.q_specs.is_empty() || self.g_specs.is_empty() {
            return Err(TveError::InvalidInput("learner needs at least one candidate per model".into()));
        }
        if self.folds < 2 {
            return Err(TveError::InvalidSize(format!("folds must be >= 2, got {}", self.folds)));
        }
        for spec in self.q_specs.iter().chain(&self.g_specs) {
            spec.validate(p)?;
        }
        if self.g_specs.iter().any(|s| s.include_treatment) {
            return Err(TveError::InvalidInput("treatment-model formulas cannot include the treatment".into()));
        }
        for (label, (lo, hi)) in [("g", self.g_bounds), ("q", self.q_bounds)] {
            if !(0.0 < lo && lo < hi && hi < 1.0) {
                return Err(TveError::InvalidInput(format!("{label} bounds ({lo}, {hi}) are not ordered in (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Truncation box applied to the fitted nuisances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationBounds {
    pub g_lo: f64,
    pub g_hi: f64,
    pub q_lo: f64,
    pub q_hi: f64,
}

/// Which candidate won the cross-validated selection, with the per-candidate
/// risks so results can be labeled.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionInfo {
    pub q_label: String,
    pub g_label: String,
    pub q_cv_risks: Vec<f64>,
    pub g_cv_risks: Vec<f64>,
}

/// Per-unit nuisance estimates, truncated into the configured box.
#[derive(Debug, Clone)]
pub struct NuisanceFit {
    pub qbar1: Array1<f64>,
    pub qbar0: Array1<f64>,
    pub g1: Array1<f64>,
    pub bounds: TruncationBounds,
    pub n_g_truncated: usize,
    pub n_q_truncated: usize,
    pub selection: Option<SelectionInfo>,
}

fn truncate_count(v: &mut Array1<f64>, lo: f64, hi: f64) -> usize {
    let mut count = 0;
    for x in v.iter_mut() {
        if *x < lo {
            *x = lo;
            count += 1;
        } else if *x > hi {
            *x = hi;
            count += 1;
        }
    }
    count
}

impl NuisanceFit {
    /// Truncate raw predictions into the box and count clamped entries.
    pub fn from_raw(
        mut qbar1: Array1<f64>,
        mut qbar0: Array1<f64>,
        mut g1: Array1<f64>,
        bounds: TruncationBounds,
    ) -> Result<Self> {
        let n = g1.len();
        if qbar1.len() != n || qbar0.len() != n || n == 0 {
            return Err(TveError::InvalidSize("nuisance vectors must share a positive length".into()));
        }
        let mut n_q = truncate_count(&mut qbar1, bounds.q_lo, bounds.q_hi);
        n_q += truncate_count(&mut qbar0, bounds.q_lo, bounds.q_hi);
        let n_g = truncate_count(&mut g1, bounds.g_lo, bounds.g_hi);
        Ok(Self { qbar1, qbar0, g1, bounds, n_g_truncated: n_g, n_q_truncated: n_q, selection: None })
    }

    pub fn n(&self) -> usize {
        self.g1.len()
    }

    /// Re-apply the truncation box in place (used after fluctuation updates).
    pub fn retruncate(&mut self) {
        truncate_count(&mut self.qbar1, self.bounds.q_lo, self.bounds.q_hi);
        truncate_count(&mut self.qbar0, self.bounds.q_lo, self.bounds.q_hi);
        truncate_count(&mut self.g1, self.bounds.g_lo, self.bounds.g_hi);
    }
}

fn validate_inputs(x: &Array2<f64>, y: &Array1<f64>, offset: Option<&Array1<f64>>) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(TveError::InvalidSize(format!(
            "design has {} rows but response has {}",
            x.nrows(),
            y.len()
        )));
    }
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(TveError::InvalidSize("empty design matrix".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(TveError::InvalidInput("design matrix contains non-finite values".into()));
    }
    if y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(TveError::InvalidInput("response must be binary".into()));
    }
    if let Some(o) = offset {
        if o.len() != y.len() {
            return Err(TveError::InvalidSize("offset length mismatch".into()));
        }
        if o.iter().any(|v| !v.is_finite()) {
            return Err(TveError::InvalidInput("offset contains non-finite values".into()));
        }
    }
    Ok(())
}

fn bernoulli_nll(eta: &Array1<f64>, y: &Array1<f64>) -> f64 {
    let mut nll = 0.0;
    for (&e, &yi) in eta.iter().zip(y.iter()) {
        let p = expit(e).clamp(1e-12, 1.0 - 1e-12);
        nll -= yi * p.ln() + (1.0 - yi) * (1.0 - p).ln();
    }
    nll
}

fn irls(
    x: &Array2<f64>,
    y: &Array1<f64>,
    offset: Option<&Array1<f64>>,
    max_iter: usize,
    tol: f64,
    lambda: f64,
) -> Result<Array1<f64>> {
    validate_inputs(x, y, offset)?;
    let n = x.nrows();
    let k = x.ncols();
    let mut beta = Array1::zeros(k);
    let eta_of = |b: &Array1<f64>| -> Array1<f64> {
        let mut eta = x.dot(b);
        if let Some(o) = offset {
            eta += o;
        }
        eta
    };
    let objective = |b: &Array1<f64>, eta: &Array1<f64>| -> f64 {
        bernoulli_nll(eta, y) + 0.5 * lambda * b.dot(b)
    };
    let mut eta = eta_of(&beta);
    let mut obj = objective(&beta, &eta);
    for iter in 0..max_iter {
        let p = eta.mapv(expit);
        let resid = y - &p;
        let mut score = x.t().dot(&resid);
        if lambda > 0.0 {
            score.scaled_add(-lambda, &beta);
        }
        let max_score = score.iter().fold(0.0f64, |m, &s| m.max(s.abs()));
        if max_score / (n as f64) < tol {
            return Ok(beta);
        }
        // Normal equations X' diag(p(1-p)) X + (lambda + jitter) I.
        let wts = p.mapv(|pi| (pi * (1.0 - pi)).max(1e-10));
        let xw = &x.view() * &wts.view().insert_axis(Axis(1));
        let mut h = x.t().dot(&xw);
        for j in 0..k {
            h[[j, j]] += lambda + SOLVE_JITTER;
        }
        let delta = solve_spd(h, &score)?;
        // Step-halving keeps the penalized deviance from increasing.
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &beta + &delta.mapv(|d| d * step);
            let cand_eta = eta_of(&cand);
            let cand_obj = objective(&cand, &cand_eta);
            if cand_obj <= obj + 1e-12 {
                beta = cand;
                eta = cand_eta;
                obj = cand_obj;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            // No descent direction left; treat current beta as converged.
            return Ok(beta);
        }
        let max_abs_beta = beta.iter().fold(0.0f64, |m, &b| m.max(b.abs()));
        if max_abs_beta > BETA_DIVERGENCE {
            return Err(TveError::Separation { max_abs_beta, iterations: iter + 1 });
        }
    }
    Ok(beta)
}

/// Maximum-likelihood logistic regression with an optional fixed offset.
/// Converges when the largest score component (per observation) drops below
/// `tol`; errors with [`TveError::Separation`] if the coefficients diverge.
pub fn fit_logistic(
    x: &Array2<f64>,
    y: &Array1<f64>,
    offset: Option<&Array1<f64>>,
    max_iter: usize,
    tol: f64,
) -> Result<Array1<f64>> {
    irls(x, y, offset, max_iter, tol, 0.0)
}

/// Ridge-penalized logistic regression; the fallback when the MLE separates.
pub fn fit_logistic_ridge(
    x: &Array2<f64>,
    y: &Array1<f64>,
    offset: Option<&Array1<f64>>,
    max_iter: usize,
    tol: f64,
    lambda: f64,
) -> Result<Array1<f64>> {
    irls(x, y, offset, max_iter, tol, lambda)
}

/// MLE with automatic ridge fallback on separation.
pub fn fit_logistic_with_fallback(
    x: &Array2<f64>,
    y: &Array1<f64>,
    offset: Option<&Array1<f64>>,
) -> Result<Array1<f64>> {
    match fit_logistic(x, y, offset, DEFAULT_MAX_ITER, DEFAULT_TOL) {
        Err(TveError::Separation { .. }) => {
            fit_logistic_ridge(x, y, offset, DEFAULT_MAX_ITER, DEFAULT_TOL, SEPARATION_RIDGE)
        }
        other => other,
    }
}

/// Deterministic fold assignment from (seed, row index).
fn fold_of(seed: u64, row: usize, folds: usize) -> usize {
    (splitmix64(seed ^ splitmix64(row as u64 + 0x7c3a_9d1f)) % folds as u64) as usize
}

struct FittedModel {
    spec_idx: usize,
    beta: Array1<f64>,
    cv_risks: Vec<f64>,
}

/// Score each candidate by V-fold cross-validated negative Bernoulli
/// log-likelihood, then refit the winner on the full data. Ties within 1e-12
/// go to the earlier (simpler) candidate.
fn cv_fit(
    d: &Dataset,
    candidates: &[FormulaSpec],
    response: &Array1<f64>,
    outcome_model: bool,
    folds: usize,
    seed: u64,
) -> Result<FittedModel> {
    let n = d.n();
    let folds = folds.min(n);
    let assignment: Vec<usize> = (0..n).map(|i| fold_of(seed, i, folds)).collect();
    let mut risks = Vec::with_capacity(candidates.len());
    for spec in candidates {
        spec.validate(d.p())?;
        // Treatment-model formulas never include A (validated upstream), so
        // the column mode only matters for the outcome side.
        let mode = if outcome_model { TreatmentColumn::Observed } else { TreatmentColumn::Fixed(0.0) };
        let x = build_design(spec, d, mode);
        let mut total_nll = 0.0;
        let mut usable = true;
        for v in 0..folds {
            let train: Vec<usize> = (0..n).filter(|&i| assignment[i] != v).collect();
            let valid: Vec<usize> = (0..n).filter(|&i| assignment[i] == v).collect();
            if valid.is_empty() {
                continue;
            }
            if train.is_empty() {
                usable = false;
                break;
            }
            let xt = x.select(Axis(0), &train);
            let yt = response.select(Axis(0), &train);
            let beta = match fit_logistic_with_fallback(&xt, &yt, None) {
                Ok(b) => b,
                Err(_) => {
                    usable = false;
                    break;
                }
            };
            let xv = x.select(Axis(0), &valid);
            let yv = response.select(Axis(0), &valid);
            total_nll += bernoulli_nll(&xv.dot(&beta), &yv);
        }
        risks.push(if usable { total_nll / n as f64 } else { f64::INFINITY });
    }
    let mut best = 0usize;
    for (i, &r) in risks.iter().enumerate().skip(1) {
        if r < risks[best] - 1e-12 {
            best = i;
        }
    }
    if !risks[best].is_finite() {
        return Err(TveError::DegenerateFit("every candidate model failed to fit".into()));
    }
    let spec = &candidates[best];
    let x = if outcome_model {
        build_design(spec, d, TreatmentColumn::Observed)
    } else {
        build_design(spec, d, TreatmentColumn::Fixed(0.0))
    };
    let beta = fit_logistic_with_fallback(&x, response, None)
        .map_err(|e| TveError::DegenerateFit(format!("selected model failed on the full data: {e}")))?;
    Ok(FittedModel { spec_idx: best, beta, cv_risks: risks })
}

fn predict(spec: &FormulaSpec, beta: &Array1<f64>, d: &Dataset, treatment: TreatmentColumn) -> Array1<f64> {
    build_design(spec, d, treatment).dot(beta).mapv(expit)
}

/// Raw (untruncated) fitted propensities from the learner's treatment-model
/// side. Used by the resampling filter, which inspects boundary mass before
/// any stabilizing truncation.
pub fn fit_propensity_raw(d: &Dataset, learner: &LearnerSpec, seed: u64) -> Result<Array1<f64>> {
    learner.validate(d.p())?;
    if !d.both_arms_present() {
        return Err(TveError::PositivityDegenerate("only one treatment arm present".into()));
    }
    let fg = cv_fit(d, &learner.g_specs, d.a(), false, learner.folds, seed)?;
    Ok(predict(&learner.g_specs[fg.spec_idx], &fg.beta, d, TreatmentColumn::Fixed(0.0)))
}

/// Fit both nuisance models by discrete cross-validated selection, predict at
/// (A=1, W), (A=0, W) and (1 | W), and truncate into the configured box.
pub fn fit_nuisances(d: &Dataset, learner: &LearnerSpec, seed: u64) -> Result<NuisanceFit> {
    learner.validate(d.p())?;
    if !d.both_arms_present() {
        return Err(TveError::PositivityDegenerate("only one treatment arm present".into()));
    }
    if learner.folds > d.n() {
        return Err(TveError::InvalidSize(format!(
            "folds {} exceeds sample size {}",
            learner.folds,
            d.n()
        )));
    }
    let misspecified = [FormulaSpec::misspecified_outcome()];
    let q_candidates: &[FormulaSpec] = if learner.misspecify_q { &misspecified } else { &learner.q_specs };
    let fq = cv_fit(d, q_candidates, d.y(), true, learner.folds, seed)?;
    let fg = cv_fit(d, &learner.g_specs, d.a(), false, learner.folds, seed)?;
    let q_spec = &q_candidates[fq.spec_idx];
    let g_spec = &learner.g_specs[fg.spec_idx];
    let qbar1 = predict(q_spec, &fq.beta, d, TreatmentColumn::Fixed(1.0));
    let qbar0 = predict(q_spec, &fq.beta, d, TreatmentColumn::Fixed(0.0));
    let g1 = predict(g_spec, &fg.beta, d, TreatmentColumn::Fixed(0.0));
    let bounds = TruncationBounds {
        g_lo: learner.g_bounds.0,
        g_hi: learner.g_bounds.1,
        q_lo: learner.q_bounds.0,
        q_hi: learner.q_bounds.1,
    };
    let mut fit = NuisanceFit::from_raw(qbar1, qbar0, g1, bounds)?;
    fit.selection = Some(SelectionInfo {
        q_label: q_spec.describe(),
        g_label: g_spec.describe(),
        q_cv_risks: fq.cv_risks,
        g_cv_risks: fg.cv_risks,
    });
    Ok(fit)
}
