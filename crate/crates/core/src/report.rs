//! Result directories and the summary report.
//!
//! A result directory holds, per model `<m>` (file stem `standard`, `lasso`,
//! `lasso_turnover`):
//!
//! * `oos_returns_<m>.csv`: date, return
//! * `weights_<m>.csv`: rebalance date × asset
//! * `lambda_delta_<m>.csv`: rebalance date, lambda, delta
//! * `delta_sma_<m>.csv`: delta with its 30-day simple moving average
//! * `short_share_<m>.csv` (non-Standard models, when Standard was run):
//!   `SS_m / (SS_m + SS_Standard)` per day
//!
//! plus `config.json`, `report.json` and `timings.csv`. Everything except
//! `timings.csv` is a deterministic function of the panel and config.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backtest::{BacktestConfig, BacktestResult, ModelPath};
use crate::metrics::{default_bandwidth, hac_variance_test_with, performance_report, PerformanceReport, StatsError, VarianceTestResult};
use crate::portfolio::ModelKind;
use crate::table::{LabeledTable, TableError};

/// Window of the delta moving average.
pub const SMA_WINDOW: usize = 30;

/// Files whose content depends on wall-clock time.
pub const NONDETERMINISTIC_FILES: [&str; 2] = ["timings.csv", "manifest.json"];

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("metrics for {model}: {source}")]
    Metrics { model: ModelKind, source: StatsError },
}

/// Trailing simple moving average; the first `window - 1` entries average
/// the values available so far.
pub fn simple_moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(x.len());
    let mut sum = 0.0;
    for i in 0..x.len() {
        sum += x[i];
        if i >= window {
            sum -= x[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// `SS_model / (SS_model + SS_standard)`; 0.5 when neither holds shorts.
pub fn short_share(model: f64, standard: f64) -> f64 {
    let total = model + standard;
    if total > 0.0 {
        model / total
    } else {
        0.5
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HacSettings {
    pub kernel: String,
    pub statistic: String,
    pub bandwidth: usize,
}

/// Summary of one or more runs, keyed by model then estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub n_assets: usize,
    pub n_days: usize,
    pub performance: BTreeMap<String, BTreeMap<String, PerformanceReport>>,
    /// Keyed by `"<Model>_vs_Standard"` then estimator.
    pub variance_tests: BTreeMap<String, BTreeMap<String, VarianceTestResult>>,
    pub hac: HacSettings,
}

impl RunReport {
    pub fn from_result(result: &BacktestResult) -> Result<Self, ReportError> {
        let estimator = result.config.estimator.to_string();
        let mut performance = BTreeMap::new();
        for path in &result.paths {
            let report = performance_report(&path.oos_returns, &path.weights, &result.realized).map_err(|source| {
                ReportError::Metrics {
                    model: path.model,
                    source,
                }
            })?;
            performance
                .entry(path.model.to_string())
                .or_insert_with(BTreeMap::new)
                .insert(estimator.clone(), report);
        }
        let bandwidth = result
            .config
            .hac_bandwidth
            .unwrap_or_else(|| default_bandwidth(result.n_days()));
        let mut variance_tests = BTreeMap::new();
        if let Some(standard) = result.path(ModelKind::Standard) {
            for path in result.paths.iter().filter(|p| p.model != ModelKind::Standard) {
                match hac_variance_test_with(&path.oos_returns, &standard.oos_returns, Some(bandwidth)) {
                    Ok(test) => {
                        variance_tests
                            .entry(format!("{}_vs_Standard", path.model))
                            .or_insert_with(BTreeMap::new)
                            .insert(estimator.clone(), test);
                    }
                    Err(StatsError::TooShort { len, .. }) => {
                        log::warn!("{len} out-of-sample days are too few for the HAC test; skipped");
                    }
                    Err(source) => {
                        return Err(ReportError::Metrics {
                            model: path.model,
                            source,
                        })
                    }
                }
            }
        }
        Ok(Self {
            n_assets: result.asset_ids.len(),
            n_days: result.n_days(),
            performance,
            variance_tests,
            hac: HacSettings {
                kernel: "parzen".into(),
                statistic: "variance difference".into(),
                bandwidth,
            },
        })
    }

    /// Adds the cells of `other` (typically another estimator's run).
    pub fn merge(&mut self, other: RunReport) {
        for (model, cells) in other.performance {
            self.performance.entry(model).or_default().extend(cells);
        }
        for (name, cells) in other.variance_tests {
            self.variance_tests.entry(name).or_default().extend(cells);
        }
    }

    pub fn read_path(path: impl AsRef<Path>) -> Result<Self, ReportError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| io_err(path, source))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Plain-text table: measure blocks, model rows, estimator columns.
    pub fn render_table(&self) -> String {
        let estimators: Vec<String> = {
            let mut all: Vec<String> = self.performance.values().flat_map(|m| m.keys().cloned()).collect();
            all.sort();
            all.dedup();
            all
        };
        let models: Vec<String> = ModelKind::ALL
            .iter()
            .map(|m| m.to_string())
            .filter(|m| self.performance.contains_key(m))
            .collect();
        let mut out = String::new();
        let header = |out: &mut String, title: &str| {
            out.push_str(&format!("{title}\n{:<16}", ""));
            for e in &estimators {
                out.push_str(&format!("{e:>12}"));
            }
            out.push('\n');
        };
        let row = |out: &mut String, label: &str, f: &dyn Fn(&str) -> Option<String>| {
            out.push_str(&format!("{label:<16}"));
            for e in &estimators {
                out.push_str(&format!("{:>12}", f(e).unwrap_or_else(|| "-".into())));
            }
            out.push('\n');
        };
        let cell = |m: &str, e: &str| self.performance.get(m).and_then(|c| c.get(e)).copied();

        header(&mut out, "Standard deviation p.a.");
        for m in &models {
            row(&mut out, m, &|e| cell(m, e).map(|r| format!("{:.4}", r.stddev_pa)));
            if let Some(tests) = self.variance_tests.get(&format!("{m}_vs_Standard")) {
                row(&mut out, "", &|e| tests.get(e).map(|t| format!("({:.4})", t.p_value)));
            }
        }
        header(&mut out, "\nTurnover");
        for m in &models {
            row(&mut out, m, &|e| cell(m, e).map(|r| format!("{:.4}", r.turnover_daily)));
        }
        header(&mut out, "\nAverage assets");
        for m in &models {
            row(&mut out, m, &|e| cell(m, e).map(|r| format!("{:.2}", r.avg_assets)));
            row(&mut out, "  % of full", &|e| cell(m, e).map(|r| format!("{:.2}", r.pct_of_full_assets)));
        }
        header(&mut out, "\nAverage short sales");
        for m in &models {
            row(&mut out, m, &|e| cell(m, e).map(|r| format!("{:.2}", r.avg_short_sales)));
            row(&mut out, "  % of full", &|e| cell(m, e).map(|r| format!("{:.2}", r.pct_of_full_short)));
        }
        out
    }
}

fn io_err(path: &Path, source: io::Error) -> ReportError {
    ReportError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn column_table(index_name: &str, dates: &[String], columns: &[(&str, Vec<f64>)]) -> LabeledTable {
    let values = DMatrix::from_fn(dates.len(), columns.len(), |i, j| columns[j].1[i]);
    LabeledTable {
        index_name: index_name.into(),
        row_labels: dates.to_vec(),
        column_labels: columns.iter().map(|(name, _)| name.to_string()).collect(),
        values,
    }
}

fn weights_table(result: &BacktestResult, path: &ModelPath) -> LabeledTable {
    let n = result.asset_ids.len();
    LabeledTable {
        index_name: "date".into(),
        row_labels: result.rebalance_dates.clone(),
        column_labels: result.asset_ids.clone(),
        values: DMatrix::from_fn(path.weights.len(), n, |t, j| path.weights[t].w[j]),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ReportError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|source| io_err(path, source))
}

/// Writes every result file into `dir` (created if missing) and returns the
/// report.
pub fn write_result_dir(result: &BacktestResult, dir: impl AsRef<Path>) -> Result<RunReport, ReportError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|source| io_err(dir, source))?;
    let standard = result.path(ModelKind::Standard);
    for path in &result.paths {
        let stem = path.model.file_stem();
        column_table("date", &result.oos_dates, &[("return", path.oos_returns.clone())])
            .write_path(dir.join(format!("oos_returns_{stem}.csv")))?;
        weights_table(result, path).write_path(dir.join(format!("weights_{stem}.csv")))?;
        column_table(
            "date",
            &result.rebalance_dates,
            &[("lambda", path.lambda_path.clone()), ("delta", path.delta_path.clone())],
        )
        .write_path(dir.join(format!("lambda_delta_{stem}.csv")))?;
        column_table(
            "date",
            &result.rebalance_dates,
            &[
                ("delta", path.delta_path.clone()),
                ("delta_sma30", simple_moving_average(&path.delta_path, SMA_WINDOW)),
            ],
        )
        .write_path(dir.join(format!("delta_sma_{stem}.csv")))?;
        if let (Some(standard), true) = (standard, path.model != ModelKind::Standard) {
            let own: Vec<f64> = path.weights.iter().map(|w| w.short_amount()).collect();
            let base: Vec<f64> = standard.weights.iter().map(|w| w.short_amount()).collect();
            let share = own.iter().zip(&base).map(|(a, b)| short_share(*a, *b)).collect();
            column_table(
                "date",
                &result.rebalance_dates,
                &[("short_amount", own), ("standard_short_amount", base), ("share", share)],
            )
            .write_path(dir.join(format!("short_share_{stem}.csv")))?;
        }
    }

    let mut timing_columns = vec![("covariance", result.covariance_seconds.clone())];
    for path in &result.paths {
        timing_columns.push((path.model.file_stem(), path.seconds.clone()));
    }
    column_table("date", &result.rebalance_dates, &timing_columns).write_path(dir.join("timings.csv"))?;

    write_json(&dir.join("config.json"), &result.config)?;
    let report = RunReport::from_result(result)?;
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

/// Reads a backtest config from JSON.
pub fn read_config(path: impl AsRef<Path>) -> Result<BacktestConfig, ReportError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| io_err(path, source))?;
    Ok(serde_json::from_str(&text)?)
}
