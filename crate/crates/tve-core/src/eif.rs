//! Influence-function machinery for the log risk ratio and for the variance
//! of its influence function: empirical moments, the per-unit influence
//! values, the variance plug-in in both algebraic forms, and the clever
//! covariates that drive the targeting flows.
//!
//! Everything here is a pure function of per-unit nuisance values plus a
//! [`MomentSet`]; aggregates inside the formulas are always taken from the
//! `MomentSet`, so the same code serves empirical fits and exact-enumeration
//! oracles.

use ndarray::Array1;

use crate::data::Dataset;
use crate::error::{Result, TveError};
use crate::learners::NuisanceFit;
use crate::numerics::{pairwise_mean, pairwise_sum};

/// Treatment-specific means below this floor make the ratio parameter
/// unusable; construction fails instead of producing infinities.
pub const PSI_FLOOR: f64 = 1e-6;

/// Empirical aggregates through which the variance and the clever covariates
/// are expressed: the treatment-specific means and five cross-moments of the
/// outcome regression and propensity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentSet {
    pub psi1: f64,
    pub psi0: f64,
    /// mean of qbar1 (1 - qbar1) / g1
    pub th1: f64,
    /// mean of qbar0 (1 - qbar0) / g0
    pub th2: f64,
    /// mean of qbar1^2
    pub th3: f64,
    /// mean of qbar0^2
    pub th4: f64,
    /// mean of qbar1 qbar0
    pub th5: f64,
}

impl MomentSet {
    pub fn new(psi1: f64, psi0: f64, th1: f64, th2: f64, th3: f64, th4: f64, th5: f64) -> Result<Self> {
        if !(psi1 >= PSI_FLOOR && psi0 >= PSI_FLOOR) {
            return Err(TveError::PsiDegenerate(format!(
                "treatment-specific means ({psi1:e}, {psi0:e}) below floor {PSI_FLOOR:e}"
            )));
        }
        let slack = 1e-12;
        if th1 < -slack || th2 < -slack {
            return Err(TveError::InvalidInput(format!("negative variance moments th1={th1}, th2={th2}")));
        }
        if th3 > psi1 + slack || th4 > psi0 + slack || th5 > psi1.min(psi0) + slack {
            return Err(TveError::InvalidInput(
                "second moments exceed first moments; nuisance values outside [0, 1]?".into(),
            ));
        }
        Ok(Self { psi1, psi0, th1, th2, th3, th4, th5 })
    }
}

/// Empirical moments of a nuisance fit (plain means over the n units).
pub fn moments(fit: &NuisanceFit) -> Result<MomentSet> {
    let n = fit.n();
    let mut v1 = Vec::with_capacity(n);
    let mut v2 = Vec::with_capacity(n);
    let mut v3 = Vec::with_capacity(n);
    let mut v4 = Vec::with_capacity(n);
    let mut v5 = Vec::with_capacity(n);
    for i in 0..n {
        let q1 = fit.qbar1[i];
        let q0 = fit.qbar0[i];
        let g1 = fit.g1[i];
        let g0 = 1.0 - g1;
        v1.push(q1 * (1.0 - q1) / g1);
        v2.push(q0 * (1.0 - q0) / g0);
        v3.push(q1 * q1);
        v4.push(q0 * q0);
        v5.push(q1 * q0);
    }
    MomentSet::new(
        pairwise_mean(fit.qbar1.as_slice().unwrap()),
        pairwise_mean(fit.qbar0.as_slice().unwrap()),
        pairwise_mean(&v1),
        pairwise_mean(&v2),
        pairwise_mean(&v3),
        pairwise_mean(&v4),
        pairwise_mean(&v5),
    )
}

/// The variance expressed through the moment aggregates.
pub fn sigma2_from_moments(m: &MomentSet) -> f64 {
    m.th1 / (m.psi1 * m.psi1) + m.th2 / (m.psi0 * m.psi0) + m.th3 / (m.psi1 * m.psi1)
        + m.th4 / (m.psi0 * m.psi0)
        - 2.0 * m.th5 / (m.psi1 * m.psi0)
}

/// Per-point integrand of the variance plug-in.
#[inline]
pub fn sigma2_integrand_at(q1: f64, q0: f64, g1: f64, m: &MomentSet) -> f64 {
    let g0 = 1.0 - g1;
    let contrast = q1 / m.psi1 - q0 / m.psi0;
    q1 * (1.0 - q1) / (m.psi1 * m.psi1 * g1) + q0 * (1.0 - q0) / (m.psi0 * m.psi0 * g0)
        + contrast * contrast
}

fn qw_integrand(fit: &NuisanceFit, m: &MomentSet) -> Vec<f64> {
    (0..fit.n()).map(|i| sigma2_integrand_at(fit.qbar1[i], fit.qbar0[i], fit.g1[i], m)).collect()
}

/// Variance plug-in in its direct (integrand-mean) form. Agrees with
/// [`sigma2_from_moments`] to ~1e-12 by algebra.
pub fn sigma2_plugin(fit: &NuisanceFit, m: &MomentSet) -> f64 {
    pairwise_mean(&qw_integrand(fit, m))
}

/// Per-point influence value of the log risk ratio.
#[inline]
pub fn eif_psi_at(q1: f64, q0: f64, g1: f64, a: f64, y: f64, m: &MomentSet) -> f64 {
    let g0 = 1.0 - g1;
    let qbar_obs = if a == 1.0 { q1 } else { q0 };
    let weight = a / (m.psi1 * g1) - (1.0 - a) / (m.psi0 * g0);
    weight * (y - qbar_obs) + q1 / m.psi1 - q0 / m.psi0
}

/// Per-unit influence values of the log risk ratio over a dataset.
pub fn eif_psi(fit: &NuisanceFit, m: &MomentSet, d: &Dataset) -> Array1<f64> {
    assert_eq!(fit.n(), d.n(), "fit and dataset sizes differ");
    Array1::from_shape_fn(d.n(), |i| {
        eif_psi_at(fit.qbar1[i], fit.qbar0[i], fit.g1[i], d.a()[i], d.y()[i], m)
    })
}

/// Per-point clever covariates: the outcome-model direction evaluated at
/// both treatment levels and the propensity direction.
#[inline]
pub fn clever_covariates_at(q1: f64, q0: f64, g1: f64, m: &MomentSet) -> (f64, f64, f64) {
    let g0 = 1.0 - g1;
    let c1 = (1.0 - 2.0 * q1) / g1 + 2.0 * q1 - 2.0 * m.psi1 * q0 / m.psi0
        - (2.0 / m.psi1) * (m.th1 + m.th3)
        + 2.0 * m.th5 / m.psi0;
    let h_q1 = c1 / (m.psi1 * m.psi1 * g1);
    let c0 = (1.0 - 2.0 * q0) / g0 + 2.0 * q0 - 2.0 * m.psi0 * q1 / m.psi1
        - (2.0 / m.psi0) * (m.th2 + m.th4)
        + 2.0 * m.th5 / m.psi1;
    let h_q0 = c0 / (m.psi0 * m.psi0 * g0);
    let h_g = q0 * (1.0 - q0) / (m.psi0 * m.psi0 * g0 * g0)
        - q1 * (1.0 - q1) / (m.psi1 * m.psi1 * g1 * g1);
    (h_q1, h_q0, h_g)
}

/// Clever covariates at both treatment levels for every unit. The flows
/// update the counterfactual nuisance functions, so they need both arms.
pub fn clever_covariates_by_arm(fit: &NuisanceFit, m: &MomentSet) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
    let n = fit.n();
    let mut h_q1 = Array1::zeros(n);
    let mut h_q0 = Array1::zeros(n);
    let mut h_g = Array1::zeros(n);
    for i in 0..n {
        let (a1, a0, g) = clever_covariates_at(fit.qbar1[i], fit.qbar0[i], fit.g1[i], m);
        h_q1[i] = a1;
        h_q0[i] = a0;
        h_g[i] = g;
    }
    (h_q1, h_q0, h_g)
}

/// Clever covariates at the observed treatment: `(h_qbar, h_g)`.
pub fn clever_covariates(fit: &NuisanceFit, m: &MomentSet, d: &Dataset) -> (Array1<f64>, Array1<f64>) {
    assert_eq!(fit.n(), d.n(), "fit and dataset sizes differ");
    let (h_q1, h_q0, h_g) = clever_covariates_by_arm(fit, m);
    let h_qbar = Array1::from_shape_fn(d.n(), |i| {
        if d.a()[i] == 1.0 {
            h_q1[i]
        } else {
            h_q0[i]
        }
    });
    (h_qbar, h_g)
}

/// Influence components of the variance parameter at one outcome, with the
/// covariate-marginal component centered by the moment-form variance (the
/// exact expectation of the integrand under the distribution the moments
/// describe). Returns `(d_qw, d_qbar, d_g)`.
pub fn eif_sigma2_at(q1: f64, q0: f64, g1: f64, a: f64, y: f64, m: &MomentSet) -> (f64, f64, f64) {
    let (h_q1, h_q0, h_g) = clever_covariates_at(q1, q0, g1, m);
    let d_qw = sigma2_integrand_at(q1, q0, g1, m) - sigma2_from_moments(m);
    let d_qbar = if a == 1.0 { h_q1 * (y - q1) } else { h_q0 * (y - q0) };
    let d_g = h_g * (a - g1);
    (d_qw, d_qbar, d_g)
}

/// Per-unit influence vectors for both parameters plus the clever covariates.
#[derive(Debug, Clone)]
pub struct EifVectors {
    /// Influence values of the log risk ratio.
    pub d_psi: Array1<f64>,
    /// Covariate-marginal component (centered at the empirical mean).
    pub d_sigma_qw: Array1<f64>,
    /// Outcome-regression component: h_qbar * (Y - Qbar(A, W)).
    pub d_sigma_qbar: Array1<f64>,
    /// Propensity component: h_g * (A - g1).
    pub d_sigma_g: Array1<f64>,
    pub h_qbar: Array1<f64>,
    pub h_g: Array1<f64>,
}

impl EifVectors {
    /// Full variance-parameter influence value per unit.
    pub fn full_sigma(&self) -> Array1<f64> {
        &self.d_sigma_qw + &self.d_sigma_qbar + &self.d_sigma_g
    }

    /// Empirical mean of the two targetable components. The covariate
    /// component is empirically centered, so this is the whole estimating
    /// equation.
    pub fn pn_sigma(&self) -> f64 {
        let v: Vec<f64> = self
            .d_sigma_qbar
            .iter()
            .zip(self.d_sigma_g.iter())
            .map(|(&b, &g)| b + g)
            .collect();
        pairwise_mean(&v)
    }

    /// Sample standard deviation of the full variance-parameter influence.
    pub fn sigma_sd(&self) -> f64 {
        let full = self.full_sigma();
        crate::numerics::sample_sd(full.as_slice().unwrap())
    }
}

/// All influence vectors at a fit: the covariate component is centered at its
/// empirical mean, the outcome and propensity components multiply the clever
/// covariates by their residuals.
pub fn eif_sigma2(fit: &NuisanceFit, m: &MomentSet, d: &Dataset) -> EifVectors {
    assert_eq!(fit.n(), d.n(), "fit and dataset sizes differ");
    let n = d.n();
    let integrand = qw_integrand(fit, m);
    let integrand_mean = pairwise_mean(&integrand);
    let (h_q1, h_q0, h_g) = clever_covariates_by_arm(fit, m);
    let mut d_qw = Array1::zeros(n);
    let mut d_qbar = Array1::zeros(n);
    let mut d_g = Array1::zeros(n);
    let mut h_qbar = Array1::zeros(n);
    for i in 0..n {
        d_qw[i] = integrand[i] - integrand_mean;
        let (a, y) = (d.a()[i], d.y()[i]);
        h_qbar[i] = if a == 1.0 { h_q1[i] } else { h_q0[i] };
        let resid = y - if a == 1.0 { fit.qbar1[i] } else { fit.qbar0[i] };
        d_qbar[i] = h_qbar[i] * resid;
        d_g[i] = h_g[i] * (a - fit.g1[i]);
    }
    let d_psi = eif_psi(fit, m, d);
    EifVectors { d_psi, d_sigma_qw: d_qw, d_sigma_qbar: d_qbar, d_sigma_g: d_g, h_qbar, h_g }
}

/// Mean of squares with pairwise summation.
pub fn mean_square(xs: &Array1<f64>) -> f64 {
    let sq: Vec<f64> = xs.iter().map(|&x| x * x).collect();
    pairwise_sum(&sq) / xs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::TruncationBounds;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn wide_bounds() -> TruncationBounds {
        TruncationBounds { g_lo: 0.0, g_hi: 1.0, q_lo: 0.0, q_hi: 1.0 }
    }

    fn constant_fit(n: usize, q1: f64, q0: f64, g1: f64) -> NuisanceFit {
        NuisanceFit::from_raw(
            Array1::from_elem(n, q1),
            Array1::from_elem(n, q0),
            Array1::from_elem(n, g1),
            wide_bounds(),
        )
        .unwrap()
    }

    fn random_fit(n: usize, seed: u64) -> NuisanceFit {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let draw = |rng: &mut ChaCha12Rng| 0.05 + 0.9 * rng.gen::<f64>();
        NuisanceFit::from_raw(
            Array1::from_shape_fn(n, |_| draw(&mut rng)),
            Array1::from_shape_fn(n, |_| draw(&mut rng)),
            Array1::from_shape_fn(n, |_| draw(&mut rng)),
            wide_bounds(),
        )
        .unwrap()
    }

    fn four_cell_dataset(reps: usize) -> Dataset {
        // Equal counts of all four (A, Y) cells at a single covariate point.
        let n = 4 * reps;
        let w = Array2::from_elem((n, 1), 0.5);
        let mut a = Array1::zeros(n);
        let mut y = Array1::zeros(n);
        for i in 0..n {
            a[i] = ((i / 2) % 2) as f64;
            y[i] = (i % 2) as f64;
        }
        Dataset::new(w, a, y, vec!["W1".into()]).unwrap()
    }

    #[test]
    fn moments_of_constant_fit() {
        let m = moments(&constant_fit(8, 0.5, 0.5, 0.5)).unwrap();
        assert_eq!(m.psi1, 0.5);
        assert_eq!(m.psi0, 0.5);
        assert!((m.th1 - 0.5).abs() <= 1e-15);
        assert!((m.th2 - 0.5).abs() <= 1e-15);
        assert!((m.th3 - 0.25).abs() <= 1e-15);
        assert!((m.th4 - 0.25).abs() <= 1e-15);
        assert!((m.th5 - 0.25).abs() <= 1e-15);
    }

    #[test]
    fn zero_outcome_regression_is_psi_degenerate() {
        let fit = constant_fit(8, 0.0, 0.5, 0.5);
        assert!(matches!(moments(&fit), Err(TveError::PsiDegenerate(_))));
    }

    #[test]
    fn moments_match_naive_loop() {
        let fit = random_fit(50, 3);
        let m = moments(&fit).unwrap();
        let n = fit.n() as f64;
        let mut naive = [0.0f64; 7];
        for i in 0..fit.n() {
            let (q1, q0, g1) = (fit.qbar1[i], fit.qbar0[i], fit.g1[i]);
            naive[0] += q1;
            naive[1] += q0;
            naive[2] += q1 * (1.0 - q1) / g1;
            naive[3] += q0 * (1.0 - q0) / (1.0 - g1);
            naive[4] += q1 * q1;
            naive[5] += q0 * q0;
            naive[6] += q1 * q0;
        }
        let got = [m.psi1, m.psi0, m.th1, m.th2, m.th3, m.th4, m.th5];
        for (g, s) in got.iter().zip(naive.iter()) {
            assert!((g - s / n).abs() <= 1e-14, "{g} vs {}", s / n);
        }
    }

    #[test]
    fn psi_influence_symmetry_cases() {
        let fit = constant_fit(1, 0.5, 0.5, 0.5);
        let m = moments(&fit).unwrap();
        assert!((eif_psi_at(0.5, 0.5, 0.5, 1.0, 1.0, &m) - 2.0).abs() <= 1e-15);
        assert!((eif_psi_at(0.5, 0.5, 0.5, 0.0, 1.0, &m) + 2.0).abs() <= 1e-15);
        assert!((eif_psi_at(0.5, 0.5, 0.5, 1.0, 0.0, &m) + 2.0).abs() <= 1e-15);
    }

    #[test]
    fn plugin_is_four_at_symmetric_constants() {
        let fit = constant_fit(16, 0.5, 0.5, 0.5);
        let m = moments(&fit).unwrap();
        assert!((sigma2_plugin(&fit, &m) - 4.0).abs() <= 1e-12);
        assert!((sigma2_from_moments(&m) - 4.0).abs() <= 1e-12);
    }

    #[test]
    fn plugin_matches_exact_enumeration_at_single_point() {
        // One covariate point, qbar = 0.5 both arms, g1 = 0.25. The exact
        // second moment of the influence value over the four (A, Y) outcomes
        // (with A and Y independent here) is the oracle.
        let fit = constant_fit(4, 0.5, 0.5, 0.25);
        let m = moments(&fit).unwrap();
        let mut oracle = 0.0;
        for (a, pa) in [(1.0, 0.25), (0.0, 0.75)] {
            for (y, py) in [(1.0, 0.5), (0.0, 0.5)] {
                let d = eif_psi_at(0.5, 0.5, 0.25, a, y, &m);
                oracle += pa * py * d * d;
            }
        }
        assert!((oracle - 16.0 / 3.0).abs() <= 1e-12);
        assert!((sigma2_plugin(&fit, &m) - oracle).abs() <= 1e-12);
        assert!((sigma2_plugin(&fit, &m) - 16.0 / 3.0).abs() <= 1e-9);
    }

    #[test]
    fn theta_form_and_direct_form_agree() {
        for seed in 0..20 {
            let fit = random_fit(200, seed);
            let m = moments(&fit).unwrap();
            let direct = sigma2_plugin(&fit, &m);
            let theta = sigma2_from_moments(&m);
            assert!((direct - theta).abs() <= 1e-12, "seed {seed}: {direct} vs {theta}");
        }
    }

    #[test]
    fn clever_covariates_at_symmetric_constants() {
        let d = four_cell_dataset(4);
        let fit = constant_fit(d.n(), 0.5, 0.5, 0.5);
        let m = moments(&fit).unwrap();
        let (h_qbar, h_g) = clever_covariates(&fit, &m, &d);
        for i in 0..d.n() {
            assert!(h_g[i].abs() <= 1e-12, "h_g[{i}] = {}", h_g[i]);
            assert!((h_qbar[i] + 16.0).abs() <= 1e-12, "h_qbar[{i}] = {}", h_qbar[i]);
        }
    }

    #[test]
    fn qbar_component_vanishes_when_outcome_equals_regression() {
        // Unit with Y = 1 and qbar(A, W) = 1 has a zero residual.
        let m = MomentSet::new(0.6, 0.5, 0.2, 0.3, 0.3, 0.2, 0.25).unwrap();
        let (_, d_qbar, _) = eif_sigma2_at(1.0, 0.4, 0.5, 1.0, 1.0, &m);
        assert_eq!(d_qbar, 0.0);
    }

    #[test]
    fn qw_component_is_empirically_centered() {
        let d = four_cell_dataset(13);
        let fit = random_fit(d.n(), 9);
        let m = moments(&fit).unwrap();
        let v = eif_sigma2(&fit, &m, &d);
        let mean_qw = pairwise_mean(v.d_sigma_qw.as_slice().unwrap());
        assert!(mean_qw.abs() <= 1e-12, "mean d_qw = {mean_qw:e}");
    }

    /// Exact enumeration over a discrete-covariate distribution with true
    /// nuisances: the full influence value must have mean zero, and each
    /// component must have mean zero conditionally on its own tangent space.
    #[test]
    fn enumeration_mean_zero_at_truth() {
        let pw = [0.3, 0.7];
        let g1 = [0.2, 0.6];
        let q1 = [0.3, 0.8];
        let q0 = [0.5, 0.4];
        // True aggregates under the discrete distribution.
        let psi1: f64 = pw.iter().zip(&q1).map(|(p, q)| p * q).sum();
        let psi0: f64 = pw.iter().zip(&q0).map(|(p, q)| p * q).sum();
        let th1: f64 = (0..2).map(|k| pw[k] * q1[k] * (1.0 - q1[k]) / g1[k]).sum();
        let th2: f64 = (0..2).map(|k| pw[k] * q0[k] * (1.0 - q0[k]) / (1.0 - g1[k])).sum();
        let th3: f64 = (0..2).map(|k| pw[k] * q1[k] * q1[k]).sum();
        let th4: f64 = (0..2).map(|k| pw[k] * q0[k] * q0[k]).sum();
        let th5: f64 = (0..2).map(|k| pw[k] * q1[k] * q0[k]).sum();
        let m = MomentSet::new(psi1, psi0, th1, th2, th3, th4, th5).unwrap();

        let mut total = 0.0;
        for k in 0..2 {
            let mut cond_g = 0.0;
            for (a, pa) in [(1.0, g1[k]), (0.0, 1.0 - g1[k])] {
                let qy = if a == 1.0 { q1[k] } else { q0[k] };
                let mut cond_qbar = 0.0;
                for (y, py) in [(1.0, qy), (0.0, 1.0 - qy)] {
                    let (d_qw, d_qbar, d_g) = eif_sigma2_at(q1[k], q0[k], g1[k], a, y, &m);
                    total += pw[k] * pa * py * (d_qw + d_qbar + d_g);
                    cond_qbar += py * d_qbar;
                }
                assert!(cond_qbar.abs() <= 1e-10, "E[d_qbar | A={a}, W={k}] = {cond_qbar:e}");
                let (_, _, d_g) = eif_sigma2_at(q1[k], q0[k], g1[k], a, 1.0, &m);
                cond_g += pa * d_g;
            }
            assert!(cond_g.abs() <= 1e-10, "E[d_g | W={k}] = {cond_g:e}");
        }
        assert!(total.abs() <= 1e-10, "E[full influence] = {total:e}");

        // Plug-in at the truth equals the exact variance of the psi influence.
        let mut var = 0.0;
        let mut sigma_plug = 0.0;
        for k in 0..2 {
            sigma_plug += pw[k] * sigma2_integrand_at(q1[k], q0[k], g1[k], &m);
            for (a, pa) in [(1.0, g1[k]), (0.0, 1.0 - g1[k])] {
                let qy = if a == 1.0 { q1[k] } else { q0[k] };
                for (y, py) in [(1.0, qy), (0.0, 1.0 - qy)] {
                    let dv = eif_psi_at(q1[k], q0[k], g1[k], a, y, &m);
                    var += pw[k] * pa * py * dv * dv;
                }
            }
        }
        assert!((sigma_plug - var).abs() <= 1e-10, "plug-in {sigma_plug} vs Var(D) {var}");
    }

    #[test]
    fn row_permutation_leaves_scalars_unchanged() {
        let spec = crate::data::DgdSpec::new(crate::data::DgdKind::Simple, 0.0, 0.5).unwrap();
        let (d, _) = crate::data::simulate(&spec, 257, 31).unwrap();
        let fit = random_fit(257, 31);
        let m = moments(&fit).unwrap();
        let v = eif_sigma2(&fit, &m, &d);
        // Reverse-order permutation.
        let idx: Vec<usize> = (0..257).rev().collect();
        let dp = d.subset(&idx).unwrap();
        let fitp = NuisanceFit::from_raw(
            Array1::from_shape_fn(257, |i| fit.qbar1[idx[i]]),
            Array1::from_shape_fn(257, |i| fit.qbar0[idx[i]]),
            Array1::from_shape_fn(257, |i| fit.g1[idx[i]]),
            wide_bounds(),
        )
        .unwrap();
        let mp = moments(&fitp).unwrap();
        assert!((m.psi1 - mp.psi1).abs() <= 1e-12);
        assert!((sigma2_plugin(&fit, &m) - sigma2_plugin(&fitp, &mp)).abs() <= 1e-12);
        let vp = eif_sigma2(&fitp, &mp, &dp);
        assert!((v.pn_sigma() - vp.pn_sigma()).abs() <= 1e-12);
        for i in 0..257 {
            assert!((v.d_sigma_qbar[idx[i]] - vp.d_sigma_qbar[i]).abs() <= 1e-9);
        }
    }

    #[test]
    fn mean_square_basics() {
        assert_eq!(mean_square(&array![2.0, -2.0, 2.0, -2.0]), 4.0);
        assert_eq!(mean_square(&array![0.0, 0.0, 0.0]), 0.0);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            /// The two algebraic forms of the variance agree on arbitrary fits.
            #[test]
            fn sigma2_forms_agree(seed in 0u64..10_000) {
                let fit = random_fit(64, seed);
                let m = moments(&fit).unwrap();
                let direct = sigma2_plugin(&fit, &m);
                let theta = sigma2_from_moments(&m);
                prop_assert!((direct - theta).abs() <= 1e-12);
                prop_assert!(direct > 0.0);
            }
        }
    }
}
