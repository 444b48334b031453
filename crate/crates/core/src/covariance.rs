//! Covariance estimators: sample (ML), linear shrinkage toward a
//! constant-correlation target, analytic non-linear eigenvalue shrinkage,
//! and POET (principal components plus thresholded residual covariance).
//!
//! Every estimator works on a window of returns (rows are days) and returns
//! an exactly symmetric, PSD-clipped [`CovEstimate`].

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{clip_psd, reassemble, sorted_eigen, symmetrize};
use crate::market_data::ReturnPanel;
use crate::table::LabeledTable;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CovError {
    #[error("window has {rows} rows; the estimator needs at least {needed}")]
    TooFewObservations { rows: usize, needed: usize },
    #[error("constant-correlation target needs at least two assets, got {0}")]
    TooFewAssets(usize),
    #[error("non-linear shrinkage needs more observations than assets (tau = {tau}, n = {n})")]
    Underdetermined { tau: usize, n: usize },
    #[error("invalid factor count {k} (must be <= {max})")]
    InvalidFactorCount { k: usize, max: usize },
    #[error("invalid threshold {0} (must be >= 0)")]
    InvalidThreshold(f64),
    #[error("shrinkage intensity {0} outside [0, 1]")]
    InvalidIntensity(f64),
    #[error("empty factor-count candidate list")]
    NoCandidates,
    #[error("unknown estimator `{0}` (expected ml, lw-lin, lw-nl or poet)")]
    UnknownEstimator(String),
    #[error("non-finite value in the return window")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Estimator {
    #[serde(rename = "ml")]
    Ml,
    #[serde(rename = "lw-lin")]
    LwLin,
    #[serde(rename = "lw-nl")]
    LwNl,
    #[serde(rename = "poet")]
    Poet,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [Estimator::Ml, Estimator::LwLin, Estimator::LwNl, Estimator::Poet];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Ml => "ml",
            Estimator::LwLin => "lw-lin",
            Estimator::LwNl => "lw-nl",
            Estimator::Poet => "poet",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = CovError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ml" | "sample" => Ok(Estimator::Ml),
            "lw-lin" | "lw_lin" => Ok(Estimator::LwLin),
            "lw-nl" | "lw_nl" => Ok(Estimator::LwNl),
            "poet" => Ok(Estimator::Poet),
            other => Err(CovError::UnknownEstimator(other.to_string())),
        }
    }
}

/// Estimator-specific diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovMeta {
    Sample,
    LinearShrinkage {
        intensity: f64,
        average_correlation: f64,
    },
    NonlinearShrinkage {
        /// Sample eigenvalues, descending.
        sample_eigenvalues: Vec<f64>,
        /// Shrunk eigenvalues, matched to `sample_eigenvalues`.
        shrunk_eigenvalues: Vec<f64>,
        /// `n / (tau - 1)`, the effective concentration after demeaning.
        concentration: f64,
        bandwidth: f64,
    },
    Poet {
        factors: usize,
        threshold: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovEstimate {
    pub matrix: DMatrix<f64>,
    pub estimator: Estimator,
    pub meta: CovMeta,
    /// Smallest eigenvalue before PSD clipping.
    pub min_eigenvalue: f64,
}

impl CovEstimate {
    fn finish(raw: DMatrix<f64>, estimator: Estimator, meta: CovMeta) -> Self {
        let (matrix, min_eigenvalue) = clip_psd(raw);
        Self {
            matrix,
            estimator,
            meta,
            min_eigenvalue,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Exports the matrix with asset ids as both header and row labels.
    pub fn to_table(&self, asset_ids: &[String]) -> LabeledTable {
        LabeledTable {
            index_name: "asset".to_string(),
            row_labels: asset_ids.to_vec(),
            column_labels: asset_ids.to_vec(),
            values: self.matrix.clone(),
        }
    }
}

fn check_window(x: &DMatrix<f64>, needed: usize) -> Result<(), CovError> {
    if x.nrows() < needed {
        return Err(CovError::TooFewObservations {
            rows: x.nrows(),
            needed,
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(CovError::NonFinite);
    }
    Ok(())
}

/// Column-demeaned copy of the window.
fn demeaned(x: &DMatrix<f64>) -> DMatrix<f64> {
    let t = x.nrows() as f64;
    let mut out = x.clone();
    for mut col in out.column_iter_mut() {
        let mean = col.sum() / t;
        col.add_scalar_mut(-mean);
    }
    out
}

/// Unbiased sample covariance (denominator `tau - 1`), exactly symmetric but
/// not yet clipped.
fn raw_sample(x: &DMatrix<f64>) -> DMatrix<f64> {
    let xc = demeaned(x);
    let mut s = xc.tr_mul(&xc) / (x.nrows() as f64 - 1.0);
    symmetrize(&mut s);
    s
}

pub fn sample_cov(window: &ReturnPanel) -> Result<CovEstimate, CovError> {
    sample_cov_matrix(window.returns())
}

pub fn sample_cov_matrix(x: &DMatrix<f64>) -> Result<CovEstimate, CovError> {
    check_window(x, 2)?;
    Ok(CovEstimate::finish(raw_sample(x), Estimator::Ml, CovMeta::Sample))
}

/// Average off-diagonal correlation; pairs involving a zero-variance asset
/// contribute 0.
fn average_correlation(s: &DMatrix<f64>) -> f64 {
    let n = s.nrows();
    let sd: Vec<f64> = (0..n).map(|i| s[(i, i)].max(0.0).sqrt()).collect();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j && sd[i] > 0.0 && sd[j] > 0.0 {
                sum += s[(i, j)] / (sd[i] * sd[j]);
            }
        }
    }
    sum / (n * (n - 1)) as f64
}

fn constant_correlation_target(s: &DMatrix<f64>, r_bar: f64) -> DMatrix<f64> {
    let n = s.nrows();
    let sd: Vec<f64> = (0..n).map(|i| s[(i, i)].max(0.0).sqrt()).collect();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            s[(i, i)]
        } else {
            r_bar * sd[i] * sd[j]
        }
    })
}

/// Plug-in estimate of the optimal intensity toward the constant-correlation
/// target: `(pi - rho) / gamma / T`, clipped to `[0, 1]`. Moments use the
/// `1/T` normalization of the demeaned data.
fn constant_correlation_intensity(x: &DMatrix<f64>) -> f64 {
    let t = x.nrows();
    let n = x.ncols();
    let tf = t as f64;
    let xc = demeaned(x);
    let mut s = xc.tr_mul(&xc) / tf;
    symmetrize(&mut s);
    let var: Vec<f64> = (0..n).map(|i| s[(i, i)]).collect();
    let sd: Vec<f64> = var.iter().map(|v| v.max(0.0).sqrt()).collect();
    let r_bar = average_correlation(&s);

    let sq = xc.map(|v| v * v);
    let cube = xc.component_mul(&sq);
    // pi_ij = mean_t (x_ti x_tj)^2 - s_ij^2
    let fourth = sq.tr_mul(&sq) / tf;
    // term_ij = mean_t x_ti^3 x_tj
    let third = cube.tr_mul(&xc) / tf;

    let mut pi_hat = 0.0;
    let mut rho_diag = 0.0;
    let mut rho_off = 0.0;
    for i in 0..n {
        for j in 0..n {
            let pi_ij = fourth[(i, j)] - s[(i, j)] * s[(i, j)];
            pi_hat += pi_ij;
            if i == j {
                rho_diag += pi_ij;
            } else if sd[i] > 0.0 {
                let theta = third[(i, j)] - var[i] * s[(i, j)];
                rho_off += sd[j] / sd[i] * theta;
            }
        }
    }
    let rho = rho_diag + r_bar * rho_off;
    let target = constant_correlation_target(&s, r_bar);
    let gamma = (&target - &s).norm_squared();
    if !(gamma > 0.0) {
        return 0.0;
    }
    ((pi_hat - rho) / gamma / tf).clamp(0.0, 1.0)
}

pub fn lw_linear(window: &ReturnPanel) -> Result<CovEstimate, CovError> {
    lw_linear_matrix(window.returns(), None)
}

/// Linear shrinkage with an optional fixed intensity in `[0, 1]` instead of
/// the estimated one.
pub fn lw_linear_with_intensity(
    window: &ReturnPanel,
    intensity: Option<f64>,
) -> Result<CovEstimate, CovError> {
    lw_linear_matrix(window.returns(), intensity)
}

pub fn lw_linear_matrix(
    x: &DMatrix<f64>,
    intensity: Option<f64>,
) -> Result<CovEstimate, CovError> {
    check_window(x, 2)?;
    if x.ncols() < 2 {
        return Err(CovError::TooFewAssets(x.ncols()));
    }
    let s_val = match intensity {
        Some(v) if !(0.0..=1.0).contains(&v) => return Err(CovError::InvalidIntensity(v)),
        Some(v) => v,
        None => constant_correlation_intensity(x),
    };
    let sample = raw_sample(x);
    let r_bar = average_correlation(&sample);
    let target = constant_correlation_target(&sample, r_bar);
    let raw = target * s_val + sample * (1.0 - s_val);
    Ok(CovEstimate::finish(
        raw,
        Estimator::LwLin,
        CovMeta::LinearShrinkage {
            intensity: s_val,
            average_correlation: r_bar,
        },
    ))
}

pub fn lw_nonlinear(window: &ReturnPanel) -> Result<CovEstimate, CovError> {
    lw_nonlinear_matrix(window.returns())
}

/// Analytic non-linear shrinkage: sample eigenvectors are kept and each
/// eigenvalue is replaced using an Epanechnikov kernel estimate of the
/// sample spectral density and its Hilbert transform.
pub fn lw_nonlinear_matrix(x: &DMatrix<f64>) -> Result<CovEstimate, CovError> {
    check_window(x, 2)?;
    let n = x.ncols();
    if x.nrows() <= n {
        return Err(CovError::Underdetermined { tau: x.nrows(), n });
    }
    let sample = raw_sample(x);
    let (values, vectors) = sorted_eigen(&sample);
    // Demeaning costs one degree of freedom.
    let t_eff = (x.nrows() - 1) as f64;
    let c = n as f64 / t_eff;
    let h = t_eff.powf(-1.0 / 3.0);

    let top = values[0].max(0.0);
    if top == 0.0 {
        return Ok(CovEstimate::finish(
            DMatrix::zeros(n, n),
            Estimator::LwNl,
            CovMeta::NonlinearShrinkage {
                sample_eigenvalues: values.iter().copied().collect(),
                shrunk_eigenvalues: vec![0.0; n],
                concentration: c,
                bandwidth: h,
            },
        ));
    }
    let floor = top * 1e-12;
    let lam: Vec<f64> = values.iter().map(|v| v.max(floor)).collect();

    let sqrt5 = 5f64.sqrt();
    let pi = std::f64::consts::PI;
    let mut shrunk = DVector::zeros(n);
    for i in 0..n {
        let mut density = 0.0;
        let mut hilbert = 0.0;
        for &lj in &lam {
            let width = h * lj;
            let u = (lam[i] - lj) / width;
            density += (3.0 / (4.0 * sqrt5)) * (1.0 - u * u / 5.0).max(0.0) / width;
            let mut ht = -3.0 / (10.0 * pi) * u;
            if (u.abs() - sqrt5).abs() > 0.0 {
                ht += 3.0 / (4.0 * sqrt5 * pi)
                    * (1.0 - u * u / 5.0)
                    * ((sqrt5 - u) / (sqrt5 + u)).abs().ln();
            }
            hilbert += ht / width;
        }
        density /= n as f64;
        hilbert /= n as f64;
        let a = pi * c * lam[i] * density;
        let b = 1.0 - c - pi * c * lam[i] * hilbert;
        shrunk[i] = lam[i] / (a * a + b * b);
    }
    let raw = reassemble(&shrunk, &vectors);
    Ok(CovEstimate::finish(
        raw,
        Estimator::LwNl,
        CovMeta::NonlinearShrinkage {
            sample_eigenvalues: values.iter().copied().collect(),
            shrunk_eigenvalues: shrunk.iter().copied().collect(),
            concentration: c,
            bandwidth: h,
        },
    ))
}

pub fn poet(window: &ReturnPanel, k: usize, theta: f64) -> Result<CovEstimate, CovError> {
    poet_matrix(window.returns(), k, theta)
}

/// POET: top-`k` principal components of the sample covariance plus the
/// residual covariance soft-thresholded off the diagonal at
/// `theta * sqrt(u_ii u_jj) * sqrt(ln n / tau)`.
pub fn poet_matrix(x: &DMatrix<f64>, k: usize, theta: f64) -> Result<CovEstimate, CovError> {
    check_window(x, 2)?;
    let n = x.ncols();
    let max_k = n.min(x.nrows());
    if k > max_k {
        return Err(CovError::InvalidFactorCount { k, max: max_k });
    }
    if theta.is_nan() || theta < 0.0 {
        return Err(CovError::InvalidThreshold(theta));
    }
    let sample = raw_sample(x);
    let mut factor = DMatrix::zeros(n, n);
    if k > 0 {
        let (values, vectors) = sorted_eigen(&sample);
        let top_values = values.rows(0, k).into_owned();
        let top_vectors = vectors.columns(0, k).into_owned();
        factor = reassemble(&top_values, &top_vectors);
    }
    let residual = &sample - &factor;
    let scale = ((n as f64).ln() / x.nrows() as f64).sqrt();
    let mut thresholded = residual.clone();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let level = theta * (residual[(i, i)].max(0.0) * residual[(j, j)].max(0.0)).sqrt() * scale;
            let r = residual[(i, j)];
            thresholded[(i, j)] = if level.is_nan() {
                0.0
            } else {
                r.signum() * (r.abs() - level).max(0.0)
            };
        }
    }
    Ok(CovEstimate::finish(
        factor + thresholded,
        Estimator::Poet,
        CovMeta::Poet {
            factors: k,
            threshold: theta,
        },
    ))
}

/// Picks the factor count whose POET estimate on the first half of the
/// window is closest (Frobenius) to the sample covariance of the second
/// half. Ties go to the smaller count.
pub fn select_poet_k(
    window: &ReturnPanel,
    candidates: &[usize],
    theta: f64,
) -> Result<usize, CovError> {
    select_poet_k_matrix(window.returns(), candidates, theta)
}

pub fn select_poet_k_matrix(
    x: &DMatrix<f64>,
    candidates: &[usize],
    theta: f64,
) -> Result<usize, CovError> {
    if candidates.is_empty() {
        return Err(CovError::NoCandidates);
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() == 1 {
        return Ok(sorted[0]);
    }
    check_window(x, 4)?;
    let half = x.nrows() / 2;
    let first = x.rows(0, half).into_owned();
    let second = x.rows(half, x.nrows() - half).into_owned();
    let holdout = raw_sample(&second);
    let mut best: Option<(usize, f64)> = None;
    for &k in &sorted {
        let est = poet_matrix(&first, k, theta)?;
        let dist = (&est.matrix - &holdout).norm();
        if best.map_or(true, |(_, d)| dist < d) {
            best = Some((k, dist));
        }
    }
    Ok(best.expect("non-empty candidates").0)
}

/// Estimator choice plus the POET knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub estimator: Estimator,
    #[serde(default = "default_poet_theta")]
    pub poet_theta: f64,
    #[serde(default = "default_poet_candidates")]
    pub poet_k_candidates: Vec<usize>,
}

pub fn default_poet_theta() -> f64 {
    0.5
}

pub fn default_poet_candidates() -> Vec<usize> {
    vec![1, 2, 3, 4, 5]
}

impl EstimatorConfig {
    pub fn new(estimator: Estimator) -> Self {
        Self {
            estimator,
            poet_theta: default_poet_theta(),
            poet_k_candidates: default_poet_candidates(),
        }
    }

    pub fn estimate(&self, window: &ReturnPanel) -> Result<CovEstimate, CovError> {
        self.estimate_matrix(window.returns())
    }

    pub fn estimate_matrix(&self, x: &DMatrix<f64>) -> Result<CovEstimate, CovError> {
        match self.estimator {
            Estimator::Ml => sample_cov_matrix(x),
            Estimator::LwLin => lw_linear_matrix(x, None),
            Estimator::LwNl => lw_nonlinear_matrix(x),
            Estimator::Poet => {
                let max_k = x.ncols().min(x.nrows() / 2);
                let usable: Vec<usize> = self
                    .poet_k_candidates
                    .iter()
                    .copied()
                    .filter(|&k| k <= max_k)
                    .collect();
                let k = select_poet_k_matrix(x, &usable, self.poet_theta)?;
                poet_matrix(x, k, self.poet_theta)
            }
        }
    }
}
