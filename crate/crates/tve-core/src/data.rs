//! Observation data model, the simulated data-generating distributions,
//! CSV ingestion/export, and the positivity-filtered resampling harness.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TveError};
use crate::learners::LearnerSpec;
use crate::numerics::{expit, format_sig17};

/// Observations `(W, A, Y)`: an n x p covariate matrix, a binary treatment
/// vector, and a binary outcome vector.
#[derive(Debug, Clone)]
pub struct Dataset {
    w: Array2<f64>,
    a: Array1<f64>,
    y: Array1<f64>,
    names: Vec<String>,
}

impl Dataset {
    pub fn new(w: Array2<f64>, a: Array1<f64>, y: Array1<f64>, names: Vec<String>) -> Result<Self> {
        let n = w.nrows();
        let p = w.ncols();
        if n == 0 || p == 0 {
            return Err(TveError::InvalidSize(format!("dataset must have n >= 1 and p >= 1, got n={n}, p={p}")));
        }
        if a.len() != n || y.len() != n {
            return Err(TveError::InvalidSize(format!(
                "length mismatch: w has {n} rows, a has {}, y has {}",
                a.len(),
                y.len()
            )));
        }
        if names.len() != p {
            return Err(TveError::InvalidSize(format!("{} covariate names for p={p} columns", names.len())));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(TveError::InvalidInput("covariate matrix contains non-finite values".into()));
        }
        for (label, v) in [("treatment", &a), ("outcome", &y)] {
            if v.iter().any(|&x| x != 0.0 && x != 1.0) {
                return Err(TveError::InvalidInput(format!("{label} vector contains values outside {{0, 1}}")));
            }
        }
        Ok(Self { w, a, y, names })
    }

    pub fn n(&self) -> usize {
        self.w.nrows()
    }

    pub fn p(&self) -> usize {
        self.w.ncols()
    }

    pub fn w(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn a(&self) -> &Array1<f64> {
        &self.a
    }

    pub fn y(&self) -> &Array1<f64> {
        &self.y
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Both treatment arms present?
    pub fn both_arms_present(&self) -> bool {
        let n1 = self.a.iter().filter(|&&a| a == 1.0).count();
        n1 > 0 && n1 < self.n()
    }

    /// Row subset in the given index order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let m = idx.len();
        let p = self.p();
        let mut w = Array2::zeros((m, p));
        let mut a = Array1::zeros(m);
        let mut y = Array1::zeros(m);
        for (r, &i) in idx.iter().enumerate() {
            w.row_mut(r).assign(&self.w.row(i));
            a[r] = self.a[i];
            y[r] = self.y[i];
        }
        Self::new(w, a, y, self.names.clone())
    }
}

/// Which simulated data-generating distribution to draw from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DgdKind {
    /// Main-terms logistic links in three uniform covariates.
    Simple,
    /// Adds covariate interactions and squares to both links.
    Complex,
}

impl std::fmt::Display for DgdKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DgdKind::Simple => write!(f, "simple"),
            DgdKind::Complex => write!(f, "complex"),
        }
    }
}

/// Parameters of a simulated data-generating distribution.
///
/// `beta_p` moves the propensity link toward the boundaries (larger values
/// mean more near-positivity violations); `beta_psi` is the treatment effect
/// on the outcome's logit scale.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DgdSpec {
    pub kind: DgdKind,
    pub beta_p: f64,
    pub beta_psi: f64,
}

impl DgdSpec {
    pub fn new(kind: DgdKind, beta_p: f64, beta_psi: f64) -> Result<Self> {
        if !beta_p.is_finite() || !beta_psi.is_finite() {
            return Err(TveError::InvalidInput("beta_p and beta_psi must be finite".into()));
        }
        Ok(Self { kind, beta_p, beta_psi })
    }

    /// True propensity P(A = 1 | W = w).
    pub fn propensity(&self, w: &[f64; 3]) -> f64 {
        let b = self.beta_p;
        let mut lp = b - (b + 2.5) * w[0] + 1.75 * w[1] + (b + 3.2) * w[2];
        if self.kind == DgdKind::Complex {
            lp += -0.75 * w[0] * w[1] + 0.75 * w[1] * w[1];
        }
        expit(lp)
    }

    /// True outcome regression E(Y | W = w, A = a).
    pub fn outcome_prob(&self, w: &[f64; 3], a: f64) -> f64 {
        let lp = match self.kind {
            DgdKind::Simple => 0.1 + 0.1 * w[0] + 0.1 * w[1] + 0.1 * w[2] + self.beta_psi * a,
            DgdKind::Complex => {
                0.1 + 0.1 * w[0] + 0.1 * w[1] + 0.2 * w[2] - 0.5 * w[0] * w[2] + 0.3 * w[0] * w[0]
                    + self.beta_psi * a
            }
        };
        expit(lp)
    }
}

/// True per-unit nuisance probabilities carried alongside simulated data so
/// oracle checks can bypass estimation entirely.
#[derive(Debug, Clone)]
pub struct OracleNuisance {
    pub g1: Array1<f64>,
    pub qbar1: Array1<f64>,
    pub qbar0: Array1<f64>,
}

impl OracleNuisance {
    fn validate(&self) -> Result<()> {
        for (label, v) in [("g1", &self.g1), ("qbar1", &self.qbar1), ("qbar0", &self.qbar0)] {
            if v.iter().any(|&x| !(x > 0.0 && x < 1.0)) {
                return Err(TveError::InvalidInput(format!("oracle {label} has entries outside (0, 1)")));
            }
        }
        Ok(())
    }
}

/// Draw `n` observations from the given distribution. Deterministic in
/// `seed`: each unit consumes exactly five uniforms (W1, W2, W3, uA, uY) in
/// that order from a ChaCha stream keyed by the seed.
pub fn simulate(spec: &DgdSpec, n: usize, seed: u64) -> Result<(Dataset, OracleNuisance)> {
    if n == 0 {
        return Err(TveError::InvalidSize("cannot simulate a dataset with n = 0".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut w = Array2::zeros((n, 3));
    let mut a = Array1::zeros(n);
    let mut y = Array1::zeros(n);
    let mut g1 = Array1::zeros(n);
    let mut q1 = Array1::zeros(n);
    let mut q0 = Array1::zeros(n);
    for i in 0..n {
        let wi = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
        let pa = spec.propensity(&wi);
        let ai = if rng.gen::<f64>() < pa { 1.0 } else { 0.0 };
        let p1 = spec.outcome_prob(&wi, 1.0);
        let p0 = spec.outcome_prob(&wi, 0.0);
        let py = if ai == 1.0 { p1 } else { p0 };
        let yi = if rng.gen::<f64>() < py { 1.0 } else { 0.0 };
        w[[i, 0]] = wi[0];
        w[[i, 1]] = wi[1];
        w[[i, 2]] = wi[2];
        a[i] = ai;
        y[i] = yi;
        g1[i] = pa;
        q1[i] = p1;
        q0[i] = p0;
    }
    let names = vec!["W1".to_string(), "W2".to_string(), "W3".to_string()];
    let dataset = Dataset::new(w, a, y, names)?;
    let oracle = OracleNuisance { g1, qbar1: q1, qbar0: q0 };
    oracle.validate()?;
    Ok((dataset, oracle))
}

/// Result of CSV ingestion: the dataset plus how many rows were dropped for
/// missing values in the selected columns.
#[derive(Debug)]
pub struct LoadedCsv {
    pub dataset: Dataset,
    pub n_dropped: usize,
}

fn is_missing(field: &str) -> bool {
    let t = field.trim();
    t.is_empty() || matches!(t.to_ascii_lowercase().as_str(), "na" | "nan" | "n/a")
}

fn parse_numeric(field: &str, col: &str, row: usize) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| {
        TveError::Schema(format!("column '{col}', data row {row}: cannot parse '{field}' as a number"))
    })
}

/// Load a dataset from a headered CSV file. Rows with missing values in any
/// selected column are dropped (listwise) and counted. Treatment and outcome
/// columns must contain only 0 or 1.
pub fn load_csv<P: AsRef<Path>>(
    path: P,
    treatment_col: &str,
    outcome_col: &str,
    covariate_cols: &[String],
) -> Result<LoadedCsv> {
    if covariate_cols.is_empty() {
        return Err(TveError::Schema("at least one covariate column is required".into()));
    }
    let file = File::open(path.as_ref())?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(BufReader::new(file));
    let headers = reader.headers()?.clone();
    let col_idx = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| TveError::Schema(format!("column '{name}' not found in header")))
    };
    let a_idx = col_idx(treatment_col)?;
    let y_idx = col_idx(outcome_col)?;
    let w_idx: Vec<usize> = covariate_cols.iter().map(|c| col_idx(c)).collect::<Result<_>>()?;

    let mut w_rows: Vec<f64> = Vec::new();
    let mut a = Vec::new();
    let mut y = Vec::new();
    let mut n_dropped = 0usize;
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let selected: Vec<&str> = std::iter::once(record.get(a_idx).unwrap_or(""))
            .chain(std::iter::once(record.get(y_idx).unwrap_or("")))
            .chain(w_idx.iter().map(|&i| record.get(i).unwrap_or("")))
            .collect();
        if selected.iter().any(|f| is_missing(f)) {
            n_dropped += 1;
            continue;
        }
        let parse_binary = |field: &str, col: &str| -> Result<f64> {
            let v = parse_numeric(field, col, row)?;
            if v == 0.0 || v == 1.0 {
                Ok(v)
            } else {
                Err(TveError::Schema(format!(
                    "column '{col}', data row {row}: value '{field}' is not binary (expected 0 or 1)"
                )))
            }
        };
        a.push(parse_binary(selected[0], treatment_col)?);
        y.push(parse_binary(selected[1], outcome_col)?);
        for (k, field) in selected[2..].iter().enumerate() {
            let v = parse_numeric(field, &covariate_cols[k], row)?;
            if !v.is_finite() {
                return Err(TveError::Schema(format!(
                    "column '{}', data row {row}: non-finite value",
                    covariate_cols[k]
                )));
            }
            w_rows.push(v);
        }
    }
    let n = a.len();
    if n == 0 {
        return Err(TveError::EmptyData(format!("no usable rows ({n_dropped} dropped for missing values)")));
    }
    let p = covariate_cols.len();
    let w = Array2::from_shape_vec((n, p), w_rows)
        .map_err(|e| TveError::InvalidInput(format!("shape error assembling covariates: {e}")))?;
    let dataset = Dataset::new(w, Array1::from(a), Array1::from(y), covariate_cols.to_vec())?;
    Ok(LoadedCsv { dataset, n_dropped })
}

/// Write a dataset (and optional true-nuisance columns) as CSV with 17
/// significant digits, which round-trips f64 exactly.
pub fn write_csv<P: AsRef<Path>>(d: &Dataset, oracle: Option<&OracleNuisance>, path: P) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut out = BufWriter::new(file);
    let mut header: Vec<String> = d.names.to_vec();
    header.push("A".into());
    header.push("Y".into());
    if oracle.is_some() {
        header.extend(["g1_true".into(), "qbar1_true".into(), "qbar0_true".into()]);
    }
    writeln!(out, "{}", header.join(","))?;
    for i in 0..d.n() {
        let mut fields: Vec<String> = (0..d.p()).map(|j| format_sig17(d.w[[i, j]])).collect();
        fields.push(format!("{}", d.a[i] as i64));
        fields.push(format!("{}", d.y[i] as i64));
        if let Some(o) = oracle {
            fields.push(format_sig17(o.g1[i]));
            fields.push(format_sig17(o.qbar1[i]));
            fields.push(format_sig17(o.qbar0[i]));
        }
        writeln!(out, "{}", fields.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Default truncation level used by the resampling harness: `5 / (sqrt(m) ln m)`.
pub fn default_trunc_level(m: usize) -> f64 {
    5.0 / ((m as f64).sqrt() * (m as f64).ln())
}

/// Outcome of one filtered resampling attempt.
#[derive(Debug)]
pub enum ResampleOutcome {
    /// The subsample showed enough propensity-boundary mass to be retained.
    Accepted { dataset: Dataset, proportion: f64 },
    /// The subsample was discarded. `proportion` is the measured boundary
    /// fraction, or None when the propensity fit itself was degenerate.
    Rejected { proportion: Option<f64> },
}

/// Draw `m` rows without replacement, fit a propensity model on the
/// subsample, and accept the subsample only when the fraction of units with
/// fitted propensity outside `[level, 1 - level]` exceeds `min_prop`.
///
/// `trunc_level` defaults to `5 / (sqrt(m) ln m)` and `min_prop` to 0.01.
pub fn resample_filtered(
    source: &Dataset,
    m: usize,
    trunc_level: Option<f64>,
    min_prop: Option<f64>,
    learner: &LearnerSpec,
    seed: u64,
) -> Result<ResampleOutcome> {
    let n = source.n();
    if m == 0 || m > n {
        return Err(TveError::InvalidSize(format!("subsample size m={m} must satisfy 1 <= m <= n={n}")));
    }
    let level = trunc_level.unwrap_or_else(|| default_trunc_level(m));
    if !(level > 0.0 && level < 0.5) {
        return Err(TveError::InvalidInput(format!("trunc_level {level} must lie in (0, 0.5)")));
    }
    let min_prop = min_prop.unwrap_or(0.01);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let idx: Vec<usize> = rand::seq::index::sample(&mut rng, n, m).into_iter().collect();
    let sub = source.subset(&idx)?;
    // Raw (untruncated) fitted propensities decide the boundary fraction.
    let g_raw = match crate::learners::fit_propensity_raw(&sub, learner, seed) {
        Ok(g) => g,
        Err(TveError::PositivityDegenerate(_)) | Err(TveError::DegenerateFit(_)) => {
            return Ok(ResampleOutcome::Rejected { proportion: None });
        }
        Err(e) => return Err(e),
    };
    let outside = g_raw.iter().filter(|&&g| g < level || g > 1.0 - level).count();
    let proportion = outside as f64 / m as f64;
    if proportion > min_prop {
        Ok(ResampleOutcome::Accepted { dataset: sub, proportion })
    } else {
        Ok(ResampleOutcome::Rejected { proportion: Some(proportion) })
    }
}
