//! Targeted update of the outcome regression for the log risk ratio point
//! estimate. The fluctuation solves the estimating equation of the point
//! parameter; the downstream influence-function variance estimator is
//! evaluated at these updated estimates.

use ndarray::{Array1, Array2};

use crate::data::Dataset;
use crate::eif::{eif_psi, moments};
use crate::error::{Result, TveError};
use crate::learners::{fit_logistic_with_fallback, NuisanceFit};
use crate::numerics::{expit, logit, pairwise_mean, sample_sd};

const MAX_ROUNDS: usize = 20;

/// Outcome of the point-parameter targeting step.
#[derive(Debug, Clone)]
pub struct PsiTarget {
    /// Updated outcome regression; the propensity is carried through unchanged.
    pub fit_star: NuisanceFit,
    /// Targeted log risk ratio.
    pub psi_hat: f64,
    /// Accumulated fluctuation coefficients for the two treatment arms.
    pub epsilon: [f64; 2],
    /// Residual empirical mean of the point-parameter influence values.
    pub pn_eif_psi: f64,
    /// Fluctuation rounds actually taken.
    pub rounds: usize,
}

/// Fluctuate the outcome regression along the two-covariate submodel
/// `logit Qbar + e1 A/g1 + e2 (1-A)/g0` by offset maximum likelihood,
/// re-truncate, and iterate (at most 20 rounds) until the residual mean of
/// the influence values is below `max(1e-8, sd / (sqrt(n) ln n))`.
pub fn tmle_psi(d: &Dataset, fit0: &NuisanceFit) -> Result<PsiTarget> {
    if fit0.n() != d.n() {
        return Err(TveError::InvalidSize("fit and dataset sizes differ".into()));
    }
    if !d.both_arms_present() {
        return Err(TveError::PositivityDegenerate("only one treatment arm present".into()));
    }
    let n = d.n();
    let denom = (n as f64).sqrt() * (n as f64).ln();
    let mut fit = fit0.clone();
    let mut eps_total = [0.0f64; 2];
    let mut rounds = 0usize;
    loop {
        let m = moments(&fit)?;
        let eif = eif_psi(&fit, &m, d);
        let pn = pairwise_mean(eif.as_slice().unwrap());
        let bound = (sample_sd(eif.as_slice().unwrap()) / denom).max(1e-8);
        if pn.abs() <= bound || rounds >= MAX_ROUNDS {
            let psi_hat = m.psi1.ln() - m.psi0.ln();
            return Ok(PsiTarget { fit_star: fit, psi_hat, epsilon: eps_total, pn_eif_psi: pn, rounds });
        }
        // Offset logistic fit of Y on (A/g1, (1-A)/g0) with the current
        // regression as offset.
        let mut x = Array2::zeros((n, 2));
        let mut offset = Array1::zeros(n);
        for i in 0..n {
            let g1 = fit.g1[i];
            if d.a()[i] == 1.0 {
                x[[i, 0]] = 1.0 / g1;
                offset[i] = logit(fit.qbar1[i]);
            } else {
                x[[i, 1]] = 1.0 / (1.0 - g1);
                offset[i] = logit(fit.qbar0[i]);
            }
        }
        let eps = fit_logistic_with_fallback(&x, d.y(), Some(&offset))?;
        for i in 0..n {
            let g1 = fit.g1[i];
            fit.qbar1[i] = expit(logit(fit.qbar1[i]) + eps[0] / g1);
            fit.qbar0[i] = expit(logit(fit.qbar0[i]) + eps[1] / (1.0 - g1));
        }
        fit.retruncate();
        eps_total[0] += eps[0];
        eps_total[1] += eps[1];
        rounds += 1;
    }
}
