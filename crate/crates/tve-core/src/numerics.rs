//! Small numerical utilities: link functions, pairwise reductions, a dense
//! SPD solver for the IRLS normal equations, Gauss-Legendre quadrature, and
//! the hash used to derive per-replication RNG streams.

use ndarray::{Array1, Array2};

use crate::error::{Result, TveError};

/// Inverse logit. Written in the two-branch form so large |x| cannot overflow.
#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logit of a probability in (0, 1).
#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Pairwise (cascade) summation. Keeps rounding error at O(log n) ulps so
/// that scalar reductions are reproducible to ~1e-12 regardless of how the
/// caller chunked the work.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if xs.len() <= LEAF {
        let mut acc = 0.0;
        for &x in xs {
            acc += x;
        }
        acc
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

pub fn pairwise_mean(xs: &[f64]) -> f64 {
    debug_assert!(!xs.is_empty());
    pairwise_sum(xs) / xs.len() as f64
}

/// Sample standard deviation (n-1 denominator). Returns 0 for n < 2.
pub fn sample_sd(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = pairwise_mean(xs);
    let sq: Vec<f64> = xs.iter().map(|&x| (x - m) * (x - m)).collect();
    (pairwise_sum(&sq) / (n - 1) as f64).sqrt()
}

/// Solve `a x = b` for a symmetric positive-definite `a` by Cholesky
/// factorization. `a` is consumed. Fails if a pivot is not positive.
pub fn solve_spd(mut a: Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n);
    assert_eq!(b.len(), n);
    // In-place lower Cholesky.
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= a[[j, k]] * a[[j, k]];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(TveError::InvalidInput(format!(
                "normal equations not positive definite (pivot {j} = {d:e})"
            )));
        }
        let l = d.sqrt();
        a[[j, j]] = l;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= a[[i, k]] * a[[j, k]];
            }
            a[[i, j]] = s / l;
        }
    }
    // Forward solve L y = b.
    let mut y = b.clone();
    for i in 0..n {
        for k in 0..i {
            let t = y[k];
            y[i] -= a[[i, k]] * t;
        }
        y[i] /= a[[i, i]];
    }
    // Back solve L^T x = y.
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let t = y[k];
            y[i] -= a[[k, i]] * t;
        }
        y[i] /= a[[i, i]];
    }
    Ok(y)
}

/// Gauss-Legendre nodes and weights on [0, 1].
///
/// Nodes are found by Newton iteration on the Legendre recurrence; this is
/// accurate to machine precision for the orders used here (<= a few hundred).
pub fn gauss_legendre_unit(order: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(order >= 1);
    let n = order;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Initial guess (Chebyshev-like) for the i-th root of P_n on [-1, 1].
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Evaluate P_n(x) and P_n'(x) by the three-term recurrence.
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    // Map [-1, 1] -> [0, 1].
    for i in 0..n {
        nodes[i] = 0.5 * (nodes[i] + 1.0);
        weights[i] *= 0.5;
    }
    (nodes, weights)
}

/// Format a float with 17 significant digits, enough to round-trip f64
/// exactly; all numeric file output goes through this.
pub fn format_sig17(x: f64) -> String {
    format!("{x:.16e}")
}

/// SplitMix64 mixing step; used for fold assignment and stream derivation.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a per-replication stream key from a master seed and an index.
/// Distinct (seed, index) pairs map to well-separated keys, so replications
/// can run in any order on any number of workers.
#[inline]
pub fn derive_stream(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn expit_logit_round_trip() {
        for &p in &[1e-12, 0.001, 0.3, 0.5, 0.9, 1.0 - 1e-9] {
            assert!((expit(logit(p)) - p).abs() < 1e-12, "p = {p}");
        }
        assert!(expit(-800.0) >= 0.0);
        assert!(expit(800.0) <= 1.0);
    }

    #[test]
    fn pairwise_sum_matches_exact_on_integers() {
        let xs: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 500500.0);
    }

    #[test]
    fn pairwise_sum_is_permutation_stable() {
        let xs: Vec<f64> = (0..4097).map(|i| ((i * 37) % 101) as f64 * 1e-3 + 1e7).collect();
        let mut ys = xs.clone();
        ys.reverse();
        assert!((pairwise_sum(&xs) - pairwise_sum(&ys)).abs() < 1e-3);
    }

    #[test]
    fn spd_solve_recovers_known_solution() {
        let a = array![[4.0, 1.0, 0.0], [1.0, 3.0, 0.5], [0.0, 0.5, 2.0]];
        let x_true = array![1.0, -2.0, 0.5];
        let b = a.dot(&x_true);
        let x = solve_spd(a, &b).unwrap();
        for i in 0..3 {
            assert!((x[i] - x_true[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn spd_solve_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        let b = array![1.0, 1.0];
        assert!(solve_spd(a, &b).is_err());
    }

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let (x, w) = gauss_legendre_unit(8);
        // degree-15 polynomial is exact for 8 nodes
        let approx: f64 = x.iter().zip(&w).map(|(&xi, &wi)| wi * xi.powi(15)).sum();
        assert!((approx - 1.0 / 16.0).abs() < 1e-14);
        let total: f64 = w.iter().sum();
        assert!((total - 1.0).abs() < 1e-14);
    }

    #[test]
    fn gauss_legendre_integrates_smooth_function() {
        let (x, w) = gauss_legendre_unit(64);
        // int_0^1 expit(3u - 1) du, reference from 10^7-slice Riemann evaluated offline
        let approx: f64 = x.iter().zip(&w).map(|(&xi, &wi)| wi * expit(3.0 * xi - 1.0)).sum();
        let fine: f64 = {
            let m = 200_000;
            (0..m).map(|i| expit(3.0 * ((i as f64 + 0.5) / m as f64) - 1.0)).sum::<f64>() / m as f64
        };
        assert!((approx - fine).abs() < 1e-9);
    }

    #[test]
    fn derived_streams_differ() {
        let a = derive_stream(7, 0);
        let b = derive_stream(7, 1);
        let c = derive_stream(8, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_stream(7, 0));
    }
}
