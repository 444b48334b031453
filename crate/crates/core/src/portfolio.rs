//! The three minimum-variance models.
//!
//! * `Standard`: `min w'Σw` s.t. `1'w = 1`, solved in closed form.
//! * `Lasso`: adds the penalty `λ‖w‖₁`, solved as a QP over the split
//!   `w = w⁺ - w⁻`, `w⁺, w⁻ >= 0`.
//! * `LassoTurnover`: additionally boxes every weight to
//!   `w_prev - k <= w <= w_prev + k`.
//!
//! The penalty `λ` is the input; the realized `δ = ‖w‖₁` is an output.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covariance::CovEstimate;
use crate::linalg::{cholesky, cholesky_solve};
use crate::qp::{solve_qp_with, QpError, QpProblem, QpSettings, QpStatus};

/// Weights smaller than this in absolute value are set to exactly zero;
/// asset and short-sale counts rely on it.
pub const ZERO_SNAP: f64 = 1e-8;

/// Allowed deviation of `sum(w)` from 1.
pub const SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("covariance matrix is singular even after ridge repair")]
    Singular,
    #[error("penalty must be finite and non-negative, got {0}")]
    InvalidLambda(f64),
    #[error("turnover cap must be positive, got {0}")]
    InvalidTurnoverCap(f64),
    #[error("previous weights must sum to 1 (sum is {0})")]
    PreviousWeights(f64),
    #[error("LassoTurnover with a finite cap needs previous weights")]
    MissingPreviousWeights,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Solver(#[from] QpError),
    #[error("solver stopped with status {status:?} (KKT residual {kkt_residual:e})")]
    NotOptimal { status: QpStatus, kkt_residual: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    Standard,
    Lasso,
    LassoTurnover,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Standard, ModelKind::Lasso, ModelKind::LassoTurnover];

    /// Lower-case stem used in result file names.
    pub fn file_stem(self) -> &'static str {
        match self {
            ModelKind::Standard => "standard",
            ModelKind::Lasso => "lasso",
            ModelKind::LassoTurnover => "lasso_turnover",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ModelKind::Standard => "Standard",
            ModelKind::Lasso => "Lasso",
            ModelKind::LassoTurnover => "LassoTurnover",
        };
        f.write_str(s)
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        match key.as_str() {
            "standard" | "gmv" => Ok(ModelKind::Standard),
            "lasso" => Ok(ModelKind::Lasso),
            "lassoturnover" | "lassoto" | "turnover" => Ok(ModelKind::LassoTurnover),
            _ => Err(format!("unknown model `{s}` (expected standard, lasso or lasso-turnover)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioWeights {
    pub w: DVector<f64>,
    /// `‖w‖₁`.
    pub delta: f64,
    pub model: ModelKind,
    pub lambda: f64,
    pub date: String,
}

impl PortfolioWeights {
    pub fn new(w: DVector<f64>, model: ModelKind, lambda: f64) -> Self {
        let delta = w.lp_norm(1);
        Self {
            w,
            delta,
            model,
            lambda,
            date: String::new(),
        }
    }

    pub fn with_date(mut self, date: impl Into<String>) -> Self {
        self.date = date.into();
        self
    }

    pub fn n_assets(&self) -> usize {
        self.w.len()
    }

    pub fn nonzero_count(&self) -> usize {
        self.w.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn short_count(&self) -> usize {
        self.w.iter().filter(|&&v| v < 0.0).count()
    }

    /// Sum of absolute short positions.
    pub fn short_amount(&self) -> f64 {
        self.w.iter().filter(|&&v| v < 0.0).map(|v| -v).sum()
    }
}

/// Full description of one model solve.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub model: ModelKind,
    pub lambda: f64,
    /// Per-asset turnover cap; `f64::INFINITY` disables the box.
    pub k: f64,
    pub w_prev: Option<DVector<f64>>,
}

impl ModelSpec {
    pub fn standard() -> Self {
        Self {
            model: ModelKind::Standard,
            lambda: 0.0,
            k: f64::INFINITY,
            w_prev: None,
        }
    }

    pub fn lasso(lambda: f64) -> Self {
        Self {
            model: ModelKind::Lasso,
            lambda,
            k: f64::INFINITY,
            w_prev: None,
        }
    }

    pub fn lasso_turnover(lambda: f64, k: f64, w_prev: DVector<f64>) -> Self {
        Self {
            model: ModelKind::LassoTurnover,
            lambda,
            k,
            w_prev: Some(w_prev),
        }
    }

    pub fn solve(&self, cov: &CovEstimate) -> Result<PortfolioWeights, ModelError> {
        match self.model {
            ModelKind::Standard => gmv_standard(cov),
            ModelKind::Lasso => gmv_lasso(cov, self.lambda),
            ModelKind::LassoTurnover => {
                if self.k.is_infinite() {
                    let mut w = gmv_lasso(cov, self.lambda)?;
                    w.model = ModelKind::LassoTurnover;
                    return Ok(w);
                }
                let prev = self.w_prev.as_ref().ok_or(ModelError::MissingPreviousWeights)?;
                gmv_lasso_turnover(cov, self.lambda, self.k, prev)
            }
        }
    }
}

fn snap(w: &mut DVector<f64>) {
    for v in w.iter_mut() {
        if v.abs() < ZERO_SNAP {
            *v = 0.0;
        }
    }
}

pub fn gmv_standard(cov: &CovEstimate) -> Result<PortfolioWeights, ModelError> {
    Ok(PortfolioWeights::new(gmv_standard_weights(&cov.matrix)?, ModelKind::Standard, 0.0))
}

/// `Σ⁻¹1 / 1'Σ⁻¹1` via a Cholesky solve. A singular `Σ` gets a ridge of
/// `1e-10 · trace/n` on the diagonal first.
pub fn gmv_standard_weights(sigma: &DMatrix<f64>) -> Result<DVector<f64>, ModelError> {
    let n = sigma.nrows();
    if n == 0 || sigma.ncols() != n {
        return Err(ModelError::Dimension(format!("covariance is {}x{}", sigma.nrows(), sigma.ncols())));
    }
    let ones = DVector::from_element(n, 1.0);
    let factor = match cholesky(sigma, 1e-14) {
        Some(l) => l,
        None => {
            let mean_var = sigma.trace() / n as f64;
            let ridge = 1e-10 * if mean_var > 0.0 { mean_var } else { 1.0 };
            log::warn!("covariance is singular; adding ridge {ridge:e} to the diagonal");
            let mut repaired = sigma.clone();
            for i in 0..n {
                repaired[(i, i)] += ridge;
            }
            cholesky(&repaired, 0.0).ok_or(ModelError::Singular)?
        }
    };
    let x = cholesky_solve(&factor, &ones);
    let denom = x.sum();
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(ModelError::Singular);
    }
    let mut w = x / denom;
    snap(&mut w);
    Ok(w)
}

pub fn gmv_lasso(cov: &CovEstimate, lambda: f64) -> Result<PortfolioWeights, ModelError> {
    let problem = SplitProblem::new(&cov.matrix, None)?;
    let (w, _) = problem.solve(lambda, None)?;
    Ok(PortfolioWeights::new(w, ModelKind::Lasso, lambda))
}

pub fn gmv_lasso_turnover(
    cov: &CovEstimate,
    lambda: f64,
    k: f64,
    w_prev: &DVector<f64>,
) -> Result<PortfolioWeights, ModelError> {
    let problem = SplitProblem::new(&cov.matrix, Some(TurnoverBox { w_prev: w_prev.clone(), k }))?;
    let (w, _) = problem.solve(lambda, None)?;
    Ok(PortfolioWeights::new(w, ModelKind::LassoTurnover, lambda))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TurnoverBox {
    pub w_prev: DVector<f64>,
    pub k: f64,
}

/// The split QP over `x = (w⁺, w⁻)`:
///
/// ```text
/// min ½ x' (2 [Σ -Σ; -Σ Σ]) x + λ 1'x   s.t.  [1' -1'] x = 1,  x >= 0
/// ```
///
/// plus, with a turnover box, `w⁺ - w⁻ <= w_prev + k` and
/// `-(w⁺ - w⁻) <= k - w_prev`. Built once per covariance (and box) and
/// re-solved for each penalty.
#[derive(Debug, Clone)]
pub struct SplitProblem {
    base: QpProblem,
    n: usize,
    turnover: Option<TurnoverBox>,
    settings: QpSettings,
}

impl SplitProblem {
    pub fn new(sigma: &DMatrix<f64>, turnover: Option<TurnoverBox>) -> Result<Self, ModelError> {
        let n = sigma.nrows();
        if n == 0 || sigma.ncols() != n {
            return Err(ModelError::Dimension(format!("covariance is {}x{}", sigma.nrows(), sigma.ncols())));
        }
        let turnover = match turnover {
            Some(b) if b.k.is_infinite() => None,
            other => other,
        };
        if let Some(b) = &turnover {
            if !(b.k > 0.0) {
                return Err(ModelError::InvalidTurnoverCap(b.k));
            }
            if b.w_prev.len() != n {
                return Err(ModelError::Dimension(format!(
                    "previous weights have {} entries, covariance has {n}",
                    b.w_prev.len()
                )));
            }
            let sum = b.w_prev.sum();
            if !((sum - 1.0).abs() <= SUM_TOLERANCE) {
                return Err(ModelError::PreviousWeights(sum));
            }
        }

        let m = 2 * n;
        let mut q = DMatrix::zeros(m, m);
        for i in 0..n {
            for j in 0..n {
                let s = 2.0 * sigma[(i, j)];
                q[(i, j)] = s;
                q[(n + i, n + j)] = s;
                q[(i, n + j)] = -s;
                q[(n + i, j)] = -s;
            }
        }
        let mut e = DMatrix::zeros(1, m);
        for j in 0..n {
            e[(0, j)] = 1.0;
            e[(0, n + j)] = -1.0;
        }
        let rows = if turnover.is_some() { 4 * n } else { 2 * n };
        let mut g = DMatrix::zeros(rows, m);
        let mut h = DVector::zeros(rows);
        for j in 0..m {
            g[(j, j)] = -1.0;
        }
        if let Some(b) = &turnover {
            for j in 0..n {
                let up = m + j;
                g[(up, j)] = 1.0;
                g[(up, n + j)] = -1.0;
                h[up] = b.w_prev[j] + b.k;
                let lo = m + n + j;
                g[(lo, j)] = -1.0;
                g[(lo, n + j)] = 1.0;
                h[lo] = b.k - b.w_prev[j];
            }
        }
        let base = QpProblem::new(q, DVector::zeros(m), e, DVector::from_element(1, 1.0), g, h)?;
        Ok(Self {
            base,
            n,
            turnover,
            settings: QpSettings::default(),
        })
    }

    pub fn with_settings(mut self, settings: QpSettings) -> Self {
        self.settings = settings;
        self
    }

    /// A feasible split point: the previous weights under a turnover box,
    /// equal weights otherwise.
    pub fn default_start(&self) -> DVector<f64> {
        let n = self.n;
        let mut x = DVector::zeros(2 * n);
        match &self.turnover {
            Some(b) => {
                for j in 0..n {
                    let v = b.w_prev[j];
                    if v >= 0.0 {
                        x[j] = v;
                    } else {
                        x[n + j] = -v;
                    }
                }
            }
            None => {
                for j in 0..n {
                    x[j] = 1.0 / n as f64;
                }
            }
        }
        x
    }

    /// Solves for one penalty, optionally starting from a previous split
    /// solution. Returns the zero-snapped weights and the raw split point.
    pub fn solve(
        &self,
        lambda: f64,
        warm: Option<&DVector<f64>>,
    ) -> Result<(DVector<f64>, DVector<f64>), ModelError> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(ModelError::InvalidLambda(lambda));
        }
        let n = self.n;
        let problem = self.base.with_linear_cost(DVector::from_element(2 * n, lambda))?;
        let start = match warm {
            Some(x) => x.clone(),
            None => self.default_start(),
        };
        let sol = solve_qp_with(&problem, &self.settings, Some(&start))?;
        if !sol.is_optimal() {
            return Err(ModelError::NotOptimal {
                status: sol.status,
                kkt_residual: sol.kkt_residual,
            });
        }
        let mut w = DVector::from_fn(n, |j, _| sol.x[j] - sol.x[n + j]);
        for j in 0..n {
            if w[j].abs() >= ZERO_SNAP {
                continue;
            }
            // Snapping must not push a weight outside its turnover box.
            let allowed = self.turnover.as_ref().map_or(true, |b| b.w_prev[j].abs() <= b.k);
            if allowed {
                w[j] = 0.0;
            }
        }
        Ok((w, sol.x))
    }
}
