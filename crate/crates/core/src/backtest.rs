//! Daily rolling-window out-of-sample backtest.
//!
//! Day `d` (0-based) estimates on rows `d .. d+τ` and earns the return of row
//! `d+τ`, so a panel of `T` rows yields `T - τ` out-of-sample returns. The
//! penalty of the two LASSO models is re-selected every day by one-fold
//! cross-validation inside the window: subwindows of `τ - h` rows starting at
//! `d, d+1, .., d+h-1` are each evaluated on the row that follows them.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::covariance::{default_poet_candidates, default_poet_theta, CovError, CovEstimate, Estimator, EstimatorConfig};
use crate::market_data::ReturnPanel;
use crate::metrics::StatsError;
use crate::portfolio::{gmv_standard_weights, ModelError, ModelKind, PortfolioWeights, SplitProblem, TurnoverBox};

pub use crate::metrics::drift as drift_weights;

/// Days processed per batch; bounds the number of covariance matrices held
/// in memory at once.
const CHUNK_DAYS: usize = 32;

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("covariance estimation failed on {date}: {source}")]
    Estimation { date: String, source: CovError },
    #[error("{model} fit failed on {date}: {source}")]
    Model {
        date: String,
        model: ModelKind,
        source: ModelError,
    },
    #[error("weight drift failed on {date}: {source}")]
    Drift { date: String, source: StatsError },
}

impl BacktestError {
    /// True for errors caused by the inputs rather than by the numerics.
    pub fn is_validation(&self) -> bool {
        matches!(self, BacktestError::Config(_))
    }
}

/// The 20-point grid `0, 1e-5, .., 1.9e-4`.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..20).map(|i| i as f64 * 1e-5).collect()
}

fn default_models() -> Vec<ModelKind> {
    ModelKind::ALL.to_vec()
}

mod cap {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(k: &f64, s: S) -> Result<S::Ok, S::Error> {
        if k.is_infinite() {
            s.serialize_none()
        } else {
            s.serialize_f64(*k)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BacktestConfig {
    pub tau: usize,
    pub cv_holdout: usize,
    #[serde(default = "default_lambda_grid")]
    pub lambda_grid: Vec<f64>,
    /// Turnover cap; `null` in JSON means no cap.
    #[serde(with = "cap")]
    pub k: f64,
    pub estimator: Estimator,
    #[serde(default = "default_poet_theta")]
    pub poet_theta: f64,
    #[serde(default = "default_poet_candidates")]
    pub poet_k_candidates: Vec<usize>,
    #[serde(default = "default_models")]
    pub models: Vec<ModelKind>,
    /// Fit once per penalty on the first CV subwindow and reuse the weights
    /// for every shift.
    #[serde(default)]
    pub cv_fast: bool,
    /// Overrides the HAC bandwidth rule in reports.
    #[serde(default)]
    pub hac_bandwidth: Option<usize>,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            tau: 504,
            cv_holdout: 20,
            lambda_grid: default_lambda_grid(),
            k: 0.0005,
            estimator: Estimator::LwLin,
            poet_theta: default_poet_theta(),
            poet_k_candidates: default_poet_candidates(),
            models: default_models(),
            cv_fast: false,
            hac_bandwidth: None,
        }
    }
}

impl BacktestConfig {
    pub fn validate(&self) -> Result<(), BacktestError> {
        let fail = |msg: String| Err(BacktestError::Config(msg));
        if self.cv_holdout == 0 {
            return fail("cv_holdout must be positive".into());
        }
        if self.cv_holdout >= self.tau {
            return fail(format!("cv_holdout ({}) must be smaller than tau ({})", self.cv_holdout, self.tau));
        }
        if self.tau - self.cv_holdout < 2 {
            return fail(format!(
                "CV subwindows of tau - cv_holdout = {} rows are too short",
                self.tau - self.cv_holdout
            ));
        }
        if self.lambda_grid.is_empty() {
            return fail("lambda_grid is empty".into());
        }
        if let Some(l) = self.lambda_grid.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return fail(format!("lambda_grid contains {l}; penalties must be finite and non-negative"));
        }
        if self.lambda_grid.windows(2).any(|p| !(p[1] > p[0])) {
            return fail("lambda_grid must be strictly increasing".into());
        }
        if !(self.k > 0.0) {
            return fail(format!("turnover cap k must be positive, got {}", self.k));
        }
        if self.models.is_empty() {
            return fail("no models selected".into());
        }
        for (i, m) in self.models.iter().enumerate() {
            if self.models[..i].contains(m) {
                return fail(format!("model {m} listed twice"));
            }
        }
        if !(self.poet_theta.is_finite() && self.poet_theta >= 0.0) {
            return fail(format!("poet_theta must be finite and non-negative, got {}", self.poet_theta));
        }
        if self.estimator == Estimator::Poet && self.poet_k_candidates.is_empty() {
            return fail("poet_k_candidates is empty".into());
        }
        Ok(())
    }

    pub fn estimator_config(&self) -> EstimatorConfig {
        EstimatorConfig {
            estimator: self.estimator,
            poet_theta: self.poet_theta,
            poet_k_candidates: self.poet_k_candidates.clone(),
        }
    }

    /// Models in canonical order (Standard, Lasso, LassoTurnover).
    pub fn ordered_models(&self) -> Vec<ModelKind> {
        ModelKind::ALL.into_iter().filter(|m| self.models.contains(m)).collect()
    }

    fn subwindow_len(&self) -> usize {
        self.tau - self.cv_holdout
    }
}

/// Outcome of one cross-validation: the chosen penalty and the standard
/// deviation of the CV returns for each grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    pub lambda: f64,
    pub cv_std: Vec<f64>,
}

/// Sample standard deviation (denominator `len - 1`); 0 for fewer than two
/// values.
pub fn sample_std(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Relative gap below which two CV standard deviations count as tied; it
/// absorbs solver round-off between penalties that yield the same weights.
pub const CV_TIE_TOLERANCE: f64 = 1e-9;

/// Index of the smallest value; near-ties go to the later (larger-penalty)
/// entry.
fn argmin_last(values: &[f64]) -> usize {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let cutoff = min + CV_TIE_TOLERANCE * min.abs();
    values.iter().rposition(|v| *v <= cutoff).unwrap_or(0)
}

fn is_constant(x: &DMatrix<f64>) -> bool {
    x.column_iter().all(|c| c.iter().all(|v| *v == c[0]))
}

fn choose(grid: &[f64], cv_std: Vec<f64>) -> CvOutcome {
    CvOutcome {
        lambda: grid[argmin_last(&cv_std)],
        cv_std,
    }
}

fn degenerate(grid: &[f64]) -> CvOutcome {
    log::warn!("window returns are constant; selecting the largest penalty");
    CvOutcome {
        lambda: grid[grid.len() - 1],
        cv_std: vec![0.0; grid.len()],
    }
}

/// Split problem of one CV subwindow: no box for Lasso, the day's box for
/// LassoTurnover.
fn cv_problem(cov: &CovEstimate, model: ModelKind, k: f64, w_prev: Option<&DVector<f64>>) -> Result<SplitProblem, ModelError> {
    match model {
        ModelKind::LassoTurnover if k.is_finite() => {
            let w_prev = w_prev.ok_or(ModelError::MissingPreviousWeights)?;
            SplitProblem::new(&cov.matrix, Some(TurnoverBox { w_prev: w_prev.clone(), k }))
        }
        _ => SplitProblem::new(&cov.matrix, None),
    }
}

/// Solves one problem over the whole grid, warm-starting each penalty from
/// the previous solution.
fn grid_weights(problem: &SplitProblem, grid: &[f64]) -> Result<Vec<DVector<f64>>, ModelError> {
    let mut warm: Option<DVector<f64>> = None;
    let mut out = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let (w, x) = problem.solve(lambda, warm.as_ref())?;
        warm = Some(x);
        out.push(w);
    }
    Ok(out)
}

/// CV returns of one penalty over a sequence of subwindow problems, each
/// evaluated on its own row, warm-starting along the sequence.
fn chained_returns(
    problems: &[SplitProblem],
    eval_rows: &[DVector<f64>],
    lambda: f64,
) -> Result<Vec<f64>, ModelError> {
    let mut warm: Option<DVector<f64>> = None;
    let mut out = Vec::with_capacity(problems.len());
    for (problem, row) in problems.iter().zip(eval_rows) {
        let (w, x) = problem.solve(lambda, warm.as_ref())?;
        warm = Some(x);
        out.push(w.dot(row));
    }
    Ok(out)
}

/// CV returns of one penalty for the capped model: each shift is boxed
/// around the drifted weights of the previous shift, starting from `w_prev`.
fn turnover_path_returns(
    covs: &[&CovEstimate],
    eval_rows: &[DVector<f64>],
    lambda: f64,
    k: f64,
    w_prev: &DVector<f64>,
) -> Result<Vec<f64>, ModelError> {
    let mut prev = w_prev.clone();
    let mut out = Vec::with_capacity(covs.len());
    for (cov, row) in covs.iter().zip(eval_rows) {
        let problem = SplitProblem::new(&cov.matrix, Some(TurnoverBox { w_prev: prev, k }))?;
        let (w, _) = problem.solve(lambda, None)?;
        out.push(w.dot(row));
        prev = drift_weights(&w, row).unwrap_or(w);
    }
    Ok(out)
}

/// Selects the penalty for `model` on one estimation window of exactly `τ`
/// rows. `w_prev` is required for a capped LassoTurnover. Standard needs no
/// selection and returns λ = 0 with no CV statistics.
pub fn cross_validate_lambda(
    window: &ReturnPanel,
    config: &BacktestConfig,
    model: ModelKind,
    w_prev: Option<&DVector<f64>>,
) -> Result<CvOutcome, BacktestError> {
    config.validate()?;
    if window.n_obs() != config.tau {
        return Err(BacktestError::Config(format!(
            "window has {} rows, tau is {}",
            window.n_obs(),
            config.tau
        )));
    }
    if model == ModelKind::Standard {
        return Ok(CvOutcome {
            lambda: 0.0,
            cv_std: Vec::new(),
        });
    }
    let x = window.returns();
    let grid = &config.lambda_grid;
    if is_constant(x) {
        return Ok(degenerate(grid));
    }
    let date = window.dates().last().cloned().unwrap_or_default();
    let est = config.estimator_config();
    let h = config.cv_holdout;
    let len = config.subwindow_len();
    let model_err = |source| BacktestError::Model {
        date: date.clone(),
        model,
        source,
    };
    let mut covs = Vec::with_capacity(h);
    let shifts = if config.cv_fast { 1 } else { h };
    for s in 0..shifts {
        let cov = est
            .estimate_matrix(&x.rows(s, len).into_owned())
            .map_err(|source| BacktestError::Estimation {
                date: date.clone(),
                source,
            })?;
        covs.push(cov);
    }
    let eval_rows: Vec<DVector<f64>> = (0..h).map(|s| x.row(s + len).transpose()).collect();
    let returns: Vec<Vec<f64>> = if config.cv_fast {
        let problem = cv_problem(&covs[0], model, config.k, w_prev).map_err(model_err)?;
        let weights = grid_weights(&problem, grid).map_err(model_err)?;
        weights.iter().map(|w| eval_rows.iter().map(|r| w.dot(r)).collect()).collect()
    } else if model == ModelKind::LassoTurnover && config.k.is_finite() {
        let w_prev = w_prev.ok_or(ModelError::MissingPreviousWeights).map_err(model_err)?;
        let refs: Vec<&CovEstimate> = covs.iter().collect();
        grid.iter()
            .map(|&l| turnover_path_returns(&refs, &eval_rows, l, config.k, w_prev))
            .collect::<Result<Vec<_>, _>>()
            .map_err(model_err)?
    } else {
        let problems = covs
            .iter()
            .map(|c| cv_problem(c, model, config.k, w_prev))
            .collect::<Result<Vec<_>, _>>()
            .map_err(model_err)?;
        grid.iter()
            .map(|&l| chained_returns(&problems, &eval_rows, l))
            .collect::<Result<Vec<_>, _>>()
            .map_err(model_err)?
    };
    Ok(choose(grid, returns.iter().map(|r| sample_std(r)).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPath {
    pub model: ModelKind,
    pub oos_returns: Vec<f64>,
    pub weights: Vec<PortfolioWeights>,
    pub lambda_path: Vec<f64>,
    pub delta_path: Vec<f64>,
    /// Seconds spent fitting (including CV) per day.
    pub seconds: Vec<f64>,
}

impl ModelPath {
    fn new(model: ModelKind, days: usize) -> Self {
        Self {
            model,
            oos_returns: Vec::with_capacity(days),
            weights: Vec::with_capacity(days),
            lambda_path: Vec::with_capacity(days),
            delta_path: Vec::with_capacity(days),
            seconds: Vec::with_capacity(days),
        }
    }

    fn push(&mut self, w: PortfolioWeights, r: f64, seconds: f64) {
        self.oos_returns.push(r);
        self.lambda_path.push(w.lambda);
        self.delta_path.push(w.delta);
        self.weights.push(w);
        self.seconds.push(seconds);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestResult {
    pub config: BacktestConfig,
    pub asset_ids: Vec<String>,
    /// Last in-sample date of each day; weights are formed on it.
    pub rebalance_dates: Vec<String>,
    /// Date of the return earned by each day's weights.
    pub oos_dates: Vec<String>,
    /// Return vector earned by each day's weights.
    pub realized: Vec<DVector<f64>>,
    pub paths: Vec<ModelPath>,
    /// Previous weights used for the first LassoTurnover day.
    pub initial_w_prev: Option<DVector<f64>>,
    /// Seconds spent estimating each day's covariance.
    pub covariance_seconds: Vec<f64>,
}

impl BacktestResult {
    pub fn path(&self, model: ModelKind) -> Option<&ModelPath> {
        self.paths.iter().find(|p| p.model == model)
    }

    pub fn n_days(&self) -> usize {
        self.oos_dates.len()
    }
}

/// Covariance and CV state shared across the days of one run.
struct Context<'a> {
    config: &'a BacktestConfig,
    est: EstimatorConfig,
    x: &'a DMatrix<f64>,
    dates: &'a [String],
    /// Covariances of CV subwindows, keyed by start row.
    cv_covs: BTreeMap<usize, Arc<CovEstimate>>,
    /// Lasso CV return of each grid point, keyed by subwindow start row.
    lasso_cv: BTreeMap<usize, Vec<f64>>,
}

impl<'a> Context<'a> {
    fn rebalance_date(&self, d: usize) -> String {
        self.dates[d + self.config.tau - 1].clone()
    }

    fn eval_row(&self, start: usize) -> DVector<f64> {
        self.x.row(start + self.config.subwindow_len()).transpose()
    }

    fn estimate(&self, start: usize, len: usize, date_row: usize) -> Result<CovEstimate, BacktestError> {
        self.est
            .estimate_matrix(&self.x.rows(start, len).into_owned())
            .map_err(|source| BacktestError::Estimation {
                date: self.dates[date_row].clone(),
                source,
            })
    }

    fn window_is_constant(&self, d: usize) -> bool {
        is_constant(&self.x.rows(d, self.config.tau).into_owned())
    }

    /// Makes CV subwindow covariances available for starts `lo..hi` and
    /// drops those below `lo`.
    fn prepare_cv_covs(&mut self, lo: usize, hi: usize) -> Result<(), BacktestError> {
        self.cv_covs = self.cv_covs.split_off(&lo);
        let missing: Vec<usize> = (lo..hi).filter(|s| !self.cv_covs.contains_key(s)).collect();
        let len = self.config.subwindow_len();
        let fresh: Vec<Result<CovEstimate, BacktestError>> =
            missing.par_iter().map(|&s| self.estimate(s, len, s + len - 1)).collect();
        for (s, cov) in missing.into_iter().zip(fresh) {
            self.cv_covs.insert(s, Arc::new(cov?));
        }
        Ok(())
    }

    /// Fills the Lasso CV cache for starts `lo..hi` (faithful mode only).
    fn prepare_lasso_cv(&mut self, lo: usize, hi: usize) -> Result<(), BacktestError> {
        self.lasso_cv = self.lasso_cv.split_off(&lo);
        let missing: Vec<usize> = (lo..hi).filter(|s| !self.lasso_cv.contains_key(s)).collect();
        let grid = &self.config.lambda_grid;
        let fresh: Vec<Result<Vec<f64>, ModelError>> = missing
            .par_iter()
            .map(|s| {
                let problem = SplitProblem::new(&self.cv_covs[s].matrix, None)?;
                let row = self.eval_row(*s);
                Ok(grid_weights(&problem, grid)?.iter().map(|w| w.dot(&row)).collect())
            })
            .collect();
        for (s, r) in missing.into_iter().zip(fresh) {
            let r = r.map_err(|source| BacktestError::Model {
                date: self.dates[s + self.config.subwindow_len() - 1].clone(),
                model: ModelKind::Lasso,
                source,
            })?;
            self.lasso_cv.insert(s, r);
        }
        Ok(())
    }

    fn select_lasso(&self, d: usize) -> Result<CvOutcome, BacktestError> {
        let grid = &self.config.lambda_grid;
        if self.window_is_constant(d) {
            return Ok(degenerate(grid));
        }
        let h = self.config.cv_holdout;
        if self.config.cv_fast {
            return self.select_fast(d, ModelKind::Lasso, None);
        }
        let cv_std = (0..grid.len())
            .map(|i| {
                let r: Vec<f64> = (d..d + h).map(|s| self.lasso_cv[&s][i]).collect();
                sample_std(&r)
            })
            .collect();
        Ok(choose(grid, cv_std))
    }

    fn select_fast(&self, d: usize, model: ModelKind, w_prev: Option<&DVector<f64>>) -> Result<CvOutcome, BacktestError> {
        let grid = &self.config.lambda_grid;
        let h = self.config.cv_holdout;
        let model_err = |source| BacktestError::Model {
            date: self.rebalance_date(d),
            model,
            source,
        };
        let problem = cv_problem(&self.cv_covs[&d], model, self.config.k, w_prev).map_err(model_err)?;
        let weights = grid_weights(&problem, grid).map_err(model_err)?;
        let rows: Vec<DVector<f64>> = (d..d + h).map(|s| self.eval_row(s)).collect();
        let cv_std = weights
            .iter()
            .map(|w| sample_std(&rows.iter().map(|r| w.dot(r)).collect::<Vec<_>>()))
            .collect();
        Ok(choose(grid, cv_std))
    }

    fn select_turnover(&self, d: usize, w_prev: &DVector<f64>) -> Result<CvOutcome, BacktestError> {
        let grid = &self.config.lambda_grid;
        if self.window_is_constant(d) {
            return Ok(degenerate(grid));
        }
        if self.config.cv_fast {
            return self.select_fast(d, ModelKind::LassoTurnover, Some(w_prev));
        }
        let h = self.config.cv_holdout;
        let model_err = |source| BacktestError::Model {
            date: self.rebalance_date(d),
            model: ModelKind::LassoTurnover,
            source,
        };
        let rows: Vec<DVector<f64>> = (d..d + h).map(|s| self.eval_row(s)).collect();
        let returns: Vec<Result<Vec<f64>, ModelError>> = if self.config.k.is_finite() {
            let covs: Vec<&CovEstimate> = (d..d + h).map(|s| self.cv_covs[&s].as_ref()).collect();
            grid.par_iter()
                .map(|&l| turnover_path_returns(&covs, &rows, l, self.config.k, w_prev))
                .collect()
        } else {
            let built: Vec<Result<SplitProblem, ModelError>> = (d..d + h)
                .into_par_iter()
                .map(|s| cv_problem(&self.cv_covs[&s], ModelKind::Lasso, self.config.k, None))
                .collect();
            let problems = built.into_iter().collect::<Result<Vec<_>, _>>().map_err(model_err)?;
            grid.par_iter().map(|&l| chained_returns(&problems, &rows, l)).collect()
        };
        let cv_std = returns
            .into_iter()
            .map(|r| r.map(|r| sample_std(&r)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(model_err)?;
        Ok(choose(grid, cv_std))
    }
}

/// Output of the parallel per-day stage for one day.
struct DayFit {
    cov: CovEstimate,
    cov_seconds: f64,
    standard: Option<(DVector<f64>, f64)>,
    lasso: Option<(PortfolioWeights, f64)>,
}

/// Runs the full backtest. Results do not depend on thread scheduling.
pub fn run_backtest(panel: &ReturnPanel, config: &BacktestConfig) -> Result<BacktestResult, BacktestError> {
    config.validate()?;
    let t_obs = panel.n_obs();
    let tau = config.tau;
    if t_obs <= tau {
        return Err(BacktestError::Config(format!(
            "panel has {t_obs} rows; need more than tau = {tau}"
        )));
    }
    let days = t_obs - tau;
    let h = config.cv_holdout;
    let models = config.ordered_models();
    let want = |m| models.contains(&m);
    let needs_cv = want(ModelKind::Lasso) || want(ModelKind::LassoTurnover);
    let mut ctx = Context {
        config,
        est: config.estimator_config(),
        x: panel.returns(),
        dates: panel.dates(),
        cv_covs: BTreeMap::new(),
        lasso_cv: BTreeMap::new(),
    };

    let mut paths: Vec<ModelPath> = models.iter().map(|&m| ModelPath::new(m, days)).collect();
    let mut covariance_seconds = Vec::with_capacity(days);
    let mut initial_w_prev = None;
    let mut w_prev: Option<DVector<f64>> = None;

    for a in (0..days).step_by(CHUNK_DAYS) {
        let b = (a + CHUNK_DAYS).min(days);
        if needs_cv {
            let hi = if config.cv_fast { b } else { b + h - 1 };
            ctx.prepare_cv_covs(a, hi)?;
            if want(ModelKind::Lasso) && !config.cv_fast {
                ctx.prepare_lasso_cv(a, hi)?;
            }
        }

        let ctx_ref = &ctx;
        let fits: Vec<Result<DayFit, BacktestError>> = (a..b)
            .into_par_iter()
            .map(|d| {
                let date = ctx_ref.rebalance_date(d);
                let started = Instant::now();
                let cov = ctx_ref.estimate(d, tau, d + tau - 1)?;
                let cov_seconds = started.elapsed().as_secs_f64();
                let standard = if want(ModelKind::Standard) || (want(ModelKind::LassoTurnover) && d == 0) {
                    let started = Instant::now();
                    let w = gmv_standard_weights(&cov.matrix).map_err(|source| BacktestError::Model {
                        date: date.clone(),
                        model: ModelKind::Standard,
                        source,
                    })?;
                    Some((w, started.elapsed().as_secs_f64()))
                } else {
                    None
                };
                let lasso = if want(ModelKind::Lasso) {
                    let started = Instant::now();
                    let cv = ctx_ref.select_lasso(d)?;
                    let (w, _) = SplitProblem::new(&cov.matrix, None)
                        .and_then(|p| p.solve(cv.lambda, None))
                        .map_err(|source| BacktestError::Model {
                            date: date.clone(),
                            model: ModelKind::Lasso,
                            source,
                        })?;
                    let weights = PortfolioWeights::new(w, ModelKind::Lasso, cv.lambda).with_date(date);
                    Some((weights, started.elapsed().as_secs_f64()))
                } else {
                    None
                };
                Ok(DayFit {
                    cov,
                    cov_seconds,
                    standard,
                    lasso,
                })
            })
            .collect();

        for (d, fit) in (a..b).zip(fits) {
            let fit = fit?;
            let date = ctx.rebalance_date(d);
            let row = panel.row(d + tau);
            covariance_seconds.push(fit.cov_seconds);
            for path in paths.iter_mut() {
                match path.model {
                    ModelKind::Standard => {
                        let (w, secs) = fit.standard.clone().expect("standard weights computed");
                        let weights = PortfolioWeights::new(w, ModelKind::Standard, 0.0).with_date(date.clone());
                        let r = weights.w.dot(&row);
                        path.push(weights, r, secs);
                    }
                    ModelKind::Lasso => {
                        let (weights, secs) = fit.lasso.clone().expect("lasso weights computed");
                        let r = weights.w.dot(&row);
                        path.push(weights, r, secs);
                    }
                    ModelKind::LassoTurnover => {
                        let started = Instant::now();
                        let prev = match w_prev.take() {
                            Some(p) => p,
                            None => {
                                let (w, _) = fit.standard.clone().expect("standard weights computed");
                                initial_w_prev = Some(w.clone());
                                w
                            }
                        };
                        let cv = ctx.select_turnover(d, &prev)?;
                        let model_err = |source| BacktestError::Model {
                            date: date.clone(),
                            model: ModelKind::LassoTurnover,
                            source,
                        };
                        let problem = cv_problem(&fit.cov, ModelKind::LassoTurnover, config.k, Some(&prev)).map_err(model_err)?;
                        let (w, _) = problem.solve(cv.lambda, None).map_err(model_err)?;
                        let weights = PortfolioWeights::new(w, ModelKind::LassoTurnover, cv.lambda).with_date(date.clone());
                        let r = weights.w.dot(&row);
                        w_prev = Some(drift_weights(&weights.w, &row).map_err(|source| BacktestError::Drift {
                            date: date.clone(),
                            source,
                        })?);
                        path.push(weights, r, started.elapsed().as_secs_f64());
                    }
                }
            }
        }
    }

    Ok(BacktestResult {
        config: config.clone(),
        asset_ids: panel.asset_ids().to_vec(),
        rebalance_dates: (0..days).map(|d| panel.dates()[d + tau - 1].clone()).collect(),
        oos_dates: panel.dates()[tau..].to_vec(),
        realized: (tau..t_obs).map(|t| panel.row(t)).collect(),
        paths,
        initial_w_prev,
        covariance_seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::synth_factor_returns;

    fn small_config(tau: usize, h: usize, grid: Vec<f64>) -> BacktestConfig {
        BacktestConfig {
            tau,
            cv_holdout: h,
            lambda_grid: grid,
            k: 0.01,
            estimator: Estimator::Ml,
            ..BacktestConfig::default()
        }
    }

    #[test]
    fn default_grid() {
        let g = default_lambda_grid();
        assert_eq!(g.len(), 20);
        assert_eq!(g[0], 0.0);
        assert!((g[19] - 1.9e-4).abs() < 1e-18);
    }

    #[test]
    fn config_validation() {
        let ok = small_config(40, 5, vec![0.0, 1e-4]);
        assert!(ok.validate().is_ok());
        for bad in [
            BacktestConfig { cv_holdout: 40, ..ok.clone() },
            BacktestConfig { cv_holdout: 0, ..ok.clone() },
            BacktestConfig { lambda_grid: vec![], ..ok.clone() },
            BacktestConfig { lambda_grid: vec![1e-4, 0.0], ..ok.clone() },
            BacktestConfig { lambda_grid: vec![0.0, 0.0], ..ok.clone() },
            BacktestConfig { lambda_grid: vec![-1.0], ..ok.clone() },
            BacktestConfig { k: 0.0, ..ok.clone() },
            BacktestConfig { models: vec![], ..ok.clone() },
            BacktestConfig { models: vec![ModelKind::Lasso, ModelKind::Lasso], ..ok.clone() },
        ] {
            assert!(bad.validate().unwrap_err().is_validation());
        }
    }

    #[test]
    fn config_json_round_trip_with_infinite_cap() {
        let cfg = BacktestConfig { k: f64::INFINITY, ..small_config(40, 5, vec![0.0]) };
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"k\":null"));
        let back: BacktestConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let minimal: BacktestConfig =
            serde_json::from_str(r#"{"tau": 504, "cv_holdout": 20, "k": 0.0005, "estimator": "lw-lin"}"#).unwrap();
        assert_eq!(minimal, BacktestConfig::default());
    }

    #[test]
    fn sample_std_and_tie_break() {
        assert_eq!(sample_std(&[1.0]), 0.0);
        assert!((sample_std(&[1.0, 3.0]) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(argmin_last(&[2.0, 1.0, 1.0, 3.0]), 2);
        assert_eq!(argmin_last(&[1.0, 1.0 + 1e-12, 3.0]), 1);
        assert_eq!(argmin_last(&[1.0, 1.001]), 0);
        assert_eq!(argmin_last(&[0.0, 0.0, 0.0]), 2);
    }

    #[test]
    fn single_asset_picks_largest_lambda() {
        let panel = ReturnPanel::from_matrix(DMatrix::from_fn(60, 1, |t, _| 0.01 * (t as f64 * 1.7).sin())).unwrap();
        let cfg = small_config(40, 5, vec![0.0, 1e-4, 2e-4]);
        let window = panel.slice_rows(0, 40).unwrap();
        let cv = cross_validate_lambda(&window, &cfg, ModelKind::Lasso, None).unwrap();
        assert_eq!(cv.lambda, 2e-4);
    }

    #[test]
    fn one_point_grid() {
        let panel = synth_factor_returns(4, 60, 1, 3).unwrap().panel;
        let cfg = small_config(40, 5, vec![3e-5]);
        let window = panel.slice_rows(0, 40).unwrap();
        assert_eq!(cross_validate_lambda(&window, &cfg, ModelKind::Lasso, None).unwrap().lambda, 3e-5);
    }

    #[test]
    fn constant_window_is_degenerate() {
        let panel = ReturnPanel::from_matrix(DMatrix::from_element(40, 3, 0.001)).unwrap();
        let cfg = small_config(40, 5, vec![0.0, 1e-4]);
        assert_eq!(cross_validate_lambda(&panel, &cfg, ModelKind::Lasso, None).unwrap().lambda, 1e-4);
    }

    #[test]
    fn counts_and_one_day() {
        let panel = synth_factor_returns(5, 41, 1, 9).unwrap().panel;
        let cfg = small_config(40, 5, vec![0.0, 1e-4]);
        let res = run_backtest(&panel, &cfg).unwrap();
        assert_eq!(res.n_days(), 1);
        for p in &res.paths {
            assert_eq!(p.oos_returns.len(), 1);
        }
        assert!(run_backtest(&panel.slice_rows(0, 40).unwrap(), &cfg).is_err());
    }

    #[test]
    fn backtest_cv_matches_standalone_cv() {
        let panel = synth_factor_returns(6, 70, 2, 11).unwrap().panel;
        let cfg = small_config(40, 5, vec![0.0, 5e-5, 1e-4, 2e-4]);
        let res = run_backtest(&panel, &cfg).unwrap();
        let lasso = res.path(ModelKind::Lasso).unwrap();
        let turnover = res.path(ModelKind::LassoTurnover).unwrap();
        let mut prev = res.initial_w_prev.clone().unwrap();
        for d in 0..res.n_days() {
            let window = panel.slice_rows(d, 40).unwrap();
            let cv = cross_validate_lambda(&window, &cfg, ModelKind::Lasso, None).unwrap();
            assert_eq!(cv.lambda, lasso.lambda_path[d], "lasso day {d}");
            let cv = cross_validate_lambda(&window, &cfg, ModelKind::LassoTurnover, Some(&prev)).unwrap();
            assert_eq!(cv.lambda, turnover.lambda_path[d], "turnover day {d}");
            prev = drift_weights(&turnover.weights[d].w, &res.realized[d]).unwrap();
        }
    }

    #[test]
    fn delta_path_is_l1_norm() {
        let panel = synth_factor_returns(5, 60, 1, 4).unwrap().panel;
        let res = run_backtest(&panel, &small_config(40, 5, vec![0.0, 1e-4])).unwrap();
        for p in &res.paths {
            for (w, d) in p.weights.iter().zip(&p.delta_path) {
                assert_eq!(w.w.lp_norm(1), *d);
            }
        }
    }
}
