//! Price and return panels, positional rolling windows and a synthetic
//! factor-model generator.
//!
//! Panels are stored time-major: row `t` is one trading day, column `j` one
//! asset. Dates are opaque labels that must be strictly increasing; no
//! calendar arithmetic is done anywhere, windows are purely positional.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::table::{LabeledTable, TableError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("panel has no rows")]
    Empty,
    #[error("panel has no assets")]
    NoAssets,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("duplicate asset id `{0}`")]
    DuplicateAsset(String),
    #[error("dates must be strictly increasing: `{previous}` is followed by `{next}` (row {row})")]
    UnorderedDates {
        row: usize,
        previous: String,
        next: String,
    },
    #[error("non-positive price {value} for asset `{asset}` on `{date}`")]
    NonPositivePrice {
        date: String,
        asset: String,
        value: f64,
    },
    #[error("invalid return {value} for asset `{asset}` on `{date}` (must be finite and > -1)")]
    InvalidReturn {
        date: String,
        asset: String,
        value: f64,
    },
    #[error("window out of bounds: start {start} + length {length} exceeds {available} rows")]
    WindowOutOfBounds {
        start: usize,
        length: usize,
        available: usize,
    },
    #[error("invalid window: {0}")]
    InvalidWindow(String),
    #[error("invalid synthetic dimensions: {0}")]
    InvalidDimensions(String),
}

fn check_labels(dates: &[String], asset_ids: &[String]) -> Result<(), DataError> {
    if asset_ids.is_empty() {
        return Err(DataError::NoAssets);
    }
    let mut seen = HashSet::with_capacity(asset_ids.len());
    for id in asset_ids {
        if !seen.insert(id.as_str()) {
            return Err(DataError::DuplicateAsset(id.clone()));
        }
    }
    for (i, pair) in dates.windows(2).enumerate() {
        if pair[1] <= pair[0] {
            return Err(DataError::UnorderedDates {
                row: i + 1,
                previous: pair[0].clone(),
                next: pair[1].clone(),
            });
        }
    }
    Ok(())
}

/// Strictly positive prices, one row per date.
#[derive(Debug, Clone, PartialEq)]
pub struct PricePanel {
    dates: Vec<String>,
    prices: DMatrix<f64>,
    asset_ids: Vec<String>,
}

impl PricePanel {
    pub fn new(
        dates: Vec<String>,
        prices: DMatrix<f64>,
        asset_ids: Vec<String>,
    ) -> Result<Self, DataError> {
        if dates.is_empty() {
            return Err(DataError::Empty);
        }
        if prices.nrows() != dates.len() || prices.ncols() != asset_ids.len() {
            return Err(DataError::Shape(format!(
                "prices are {}x{}, labels are {}x{}",
                prices.nrows(),
                prices.ncols(),
                dates.len(),
                asset_ids.len()
            )));
        }
        check_labels(&dates, &asset_ids)?;
        for t in 0..prices.nrows() {
            for j in 0..prices.ncols() {
                let p = prices[(t, j)];
                if !(p.is_finite() && p > 0.0) {
                    return Err(DataError::NonPositivePrice {
                        date: dates[t].clone(),
                        asset: asset_ids[j].clone(),
                        value: p,
                    });
                }
            }
        }
        Ok(Self {
            dates,
            prices,
            asset_ids,
        })
    }

    /// Reads `date,<asset>,<asset>,...` CSV. Gaps are rejected, not imputed.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self, DataError> {
        let t = LabeledTable::read(reader)?;
        Self::new(t.row_labels, t.values, t.column_labels)
    }

    pub fn read_csv_path(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let t = LabeledTable::read_path(path)?;
        Self::new(t.row_labels, t.values, t.column_labels)
    }

    pub fn dates(&self) -> &[String] {
        &self.dates
    }

    pub fn prices(&self) -> &DMatrix<f64> {
        &self.prices
    }

    pub fn asset_ids(&self) -> &[String] {
        &self.asset_ids
    }
}

/// Discrete returns, one row per date.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnPanel {
    dates: Vec<String>,
    returns: DMatrix<f64>,
    asset_ids: Vec<String>,
}

impl ReturnPanel {
    pub fn new(
        dates: Vec<String>,
        returns: DMatrix<f64>,
        asset_ids: Vec<String>,
    ) -> Result<Self, DataError> {
        if dates.is_empty() {
            return Err(DataError::Empty);
        }
        if returns.nrows() != dates.len() || returns.ncols() != asset_ids.len() {
            return Err(DataError::Shape(format!(
                "returns are {}x{}, labels are {}x{}",
                returns.nrows(),
                returns.ncols(),
                dates.len(),
                asset_ids.len()
            )));
        }
        check_labels(&dates, &asset_ids)?;
        for t in 0..returns.nrows() {
            for j in 0..returns.ncols() {
                let r = returns[(t, j)];
                if !(r.is_finite() && r > -1.0) {
                    return Err(DataError::InvalidReturn {
                        date: dates[t].clone(),
                        asset: asset_ids[j].clone(),
                        value: r,
                    });
                }
            }
        }
        Ok(Self {
            dates,
            returns,
            asset_ids,
        })
    }

    /// Builds a panel with generated labels `d0000..` and `a000..`.
    pub fn from_matrix(returns: DMatrix<f64>) -> Result<Self, DataError> {
        let dates = (0..returns.nrows()).map(|t| format!("d{t:06}")).collect();
        let ids = (0..returns.ncols()).map(|j| format!("a{j:04}")).collect();
        Self::new(dates, returns, ids)
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, DataError> {
        let t = LabeledTable::read(reader)?;
        Self::new(t.row_labels, t.values, t.column_labels)
    }

    pub fn read_csv_path(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let t = LabeledTable::read_path(path)?;
        Self::new(t.row_labels, t.values, t.column_labels)
    }

    pub fn to_table(&self) -> LabeledTable {
        LabeledTable {
            index_name: "date".to_string(),
            row_labels: self.dates.clone(),
            column_labels: self.asset_ids.clone(),
            values: self.returns.clone(),
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        Ok(self.to_table().write(writer)?)
    }

    pub fn write_csv_path(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        Ok(self.to_table().write_path(path)?)
    }

    pub fn dates(&self) -> &[String] {
        &self.dates
    }

    pub fn returns(&self) -> &DMatrix<f64> {
        &self.returns
    }

    pub fn asset_ids(&self) -> &[String] {
        &self.asset_ids
    }

    /// Number of assets `n`.
    pub fn n_assets(&self) -> usize {
        self.returns.ncols()
    }

    /// Number of return observations `T`.
    pub fn n_obs(&self) -> usize {
        self.returns.nrows()
    }

    /// Return vector of day `t`.
    pub fn row(&self, t: usize) -> DVector<f64> {
        self.returns.row(t).transpose()
    }

    /// Contiguous rows `start..start + len` as a new panel.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self, DataError> {
        if len == 0 || start + len > self.n_obs() {
            return Err(DataError::WindowOutOfBounds {
                start,
                length: len,
                available: self.n_obs(),
            });
        }
        Ok(Self {
            dates: self.dates[start..start + len].to_vec(),
            returns: self.returns.rows(start, len).into_owned(),
            asset_ids: self.asset_ids.clone(),
        })
    }

    /// Reorders (or subsets) the asset columns.
    pub fn select_assets(&self, columns: &[usize]) -> Result<Self, DataError> {
        if let Some(&bad) = columns.iter().find(|&&c| c >= self.n_assets()) {
            return Err(DataError::Shape(format!("asset column {bad} out of range")));
        }
        let returns = self.returns.select_columns(columns);
        let ids = columns.iter().map(|&c| self.asset_ids[c].clone()).collect();
        Self::new(self.dates.clone(), returns, ids)
    }
}

/// Positional window description: `window_length` in-sample rows starting at
/// `start_index`, the last `cv_holdout` of which serve as validation days.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub window_length: usize,
    pub cv_holdout: usize,
    pub start_index: usize,
}

impl WindowSpec {
    pub fn validate(&self, available: usize) -> Result<(), DataError> {
        if self.window_length == 0 {
            return Err(DataError::InvalidWindow("window length must be positive".into()));
        }
        if self.cv_holdout == 0 || self.cv_holdout >= self.window_length {
            return Err(DataError::InvalidWindow(format!(
                "cv_holdout {} must be in 1..{}",
                self.cv_holdout, self.window_length
            )));
        }
        if self.start_index + self.window_length > available {
            return Err(DataError::WindowOutOfBounds {
                start: self.start_index,
                length: self.window_length,
                available,
            });
        }
        Ok(())
    }
}

/// `r_t = (P_t - P_{t-1}) / P_{t-1}`; the returned panel carries the dates of
/// `P_t`, so it has one row fewer than the prices.
pub fn prices_to_returns(panel: &PricePanel) -> Result<ReturnPanel, DataError> {
    let p = panel.prices();
    if p.nrows() < 2 {
        return Err(DataError::Shape(
            "at least two price rows are needed to form a return".into(),
        ));
    }
    let rows = p.nrows() - 1;
    let returns = DMatrix::from_fn(rows, p.ncols(), |t, j| {
        (p[(t + 1, j)] - p[(t, j)]) / p[(t, j)]
    });
    ReturnPanel::new(
        panel.dates()[1..].to_vec(),
        returns,
        panel.asset_ids().to_vec(),
    )
}

/// Compounds returns forward from a starting price row.
pub fn compound_prices(first: &DVector<f64>, returns: &ReturnPanel) -> DMatrix<f64> {
    let n = returns.n_assets();
    let t = returns.n_obs();
    let mut out = DMatrix::zeros(t + 1, n);
    for j in 0..n {
        out[(0, j)] = first[j];
        for s in 0..t {
            out[(s + 1, j)] = out[(s, j)] * (1.0 + returns.returns()[(s, j)]);
        }
    }
    out
}

pub fn rolling_window(panel: &ReturnPanel, spec: &WindowSpec) -> Result<ReturnPanel, DataError> {
    spec.validate(panel.n_obs())?;
    panel.slice_rows(spec.start_index, spec.window_length)
}

/// Parameters of the static-loadings Gaussian factor model
/// `r_t = B f_t + e_t`, `f_t ~ N(0, factor_vol^2 I)`, `e_t ~ N(0, idio_vol^2 I)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub n_assets: usize,
    pub n_obs: usize,
    pub n_factors: usize,
    pub factor_vol: f64,
    pub idio_vol: f64,
    /// Centre of the first factor's loadings (a market factor when 1);
    /// other factors are centred at 0.
    #[serde(default)]
    pub market_loading: f64,
    pub seed: u64,
}

impl SynthParams {
    /// Daily-return scale defaults: 1% factor vol, 1.5% idiosyncratic vol.
    pub fn new(n_assets: usize, n_obs: usize, n_factors: usize, seed: u64) -> Self {
        Self {
            n_assets,
            n_obs,
            n_factors,
            factor_vol: 0.01,
            idio_vol: 0.015,
            market_loading: 0.0,
            seed,
        }
    }

    pub fn with_vols(mut self, factor_vol: f64, idio_vol: f64) -> Self {
        self.factor_vol = factor_vol;
        self.idio_vol = idio_vol;
        self
    }

    pub fn with_market_loading(mut self, centre: f64) -> Self {
        self.market_loading = centre;
        self
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.n_assets < 2 {
            return Err(DataError::InvalidDimensions("n must be at least 2".into()));
        }
        if self.n_obs < 2 {
            return Err(DataError::InvalidDimensions("T must be at least 2".into()));
        }
        if self.n_factors < 1 || self.n_factors >= self.n_assets {
            return Err(DataError::InvalidDimensions(format!(
                "factor count {} must satisfy 1 <= K < n = {}",
                self.n_factors, self.n_assets
            )));
        }
        if !self.market_loading.is_finite() {
            return Err(DataError::InvalidDimensions("market loading must be finite".into()));
        }
        if !(self.factor_vol.is_finite() && self.factor_vol >= 0.0)
            || !(self.idio_vol.is_finite() && self.idio_vol > 0.0)
        {
            return Err(DataError::InvalidDimensions(
                "volatilities must be finite, idiosyncratic vol positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticPanel {
    pub panel: ReturnPanel,
    /// n × K loadings `B`.
    pub loadings: DMatrix<f64>,
    /// Population covariance `B Ω B' + D`.
    pub sigma_true: DMatrix<f64>,
    pub params: SynthParams,
}

/// Weekday labels starting 2000-01-03, ISO-8601 formatted.
pub fn business_day_labels(count: usize) -> Vec<String> {
    let mut day = NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid start date");
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        if !matches!(day.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(day.format("%Y-%m-%d").to_string());
        }
        day += Duration::days(1);
    }
    out
}

pub fn synth_factor_returns(
    n_assets: usize,
    n_obs: usize,
    n_factors: usize,
    seed: u64,
) -> Result<SyntheticPanel, DataError> {
    synth_factor_returns_with(SynthParams::new(n_assets, n_obs, n_factors, seed))
}

pub fn synth_factor_returns_with(params: SynthParams) -> Result<SyntheticPanel, DataError> {
    params.validate()?;
    let SynthParams {
        n_assets: n,
        n_obs: t,
        n_factors: k,
        factor_vol,
        idio_vol,
        market_loading,
        seed,
    } = params;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };

    let loadings = DMatrix::from_fn(n, k, |_, c| normal() + if c == 0 { market_loading } else { 0.0 });
    let mut returns = DMatrix::zeros(t, n);
    let mut f = DVector::zeros(k);
    for s in 0..t {
        for x in f.iter_mut() {
            *x = factor_vol * normal();
        }
        for j in 0..n {
            let systematic: f64 = (0..k).map(|c| loadings[(j, c)] * f[c]).sum();
            returns[(s, j)] = systematic + idio_vol * normal();
        }
    }

    let mut sigma_true = &loadings * loadings.transpose() * (factor_vol * factor_vol);
    for j in 0..n {
        sigma_true[(j, j)] += idio_vol * idio_vol;
    }

    let dates = business_day_labels(t);
    let ids = (0..n).map(|j| format!("A{j:03}")).collect();
    let panel = ReturnPanel::new(dates, returns, ids)?;
    Ok(SyntheticPanel {
        panel,
        loadings,
        sigma_true,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prices(values: &[f64]) -> PricePanel {
        let dates = (0..values.len()).map(|i| format!("2020-01-{:02}", i + 1)).collect();
        PricePanel::new(
            dates,
            DMatrix::from_column_slice(values.len(), 1, values),
            vec!["X".into()],
        )
        .unwrap()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-15 * b.abs().max(1.0)
    }

    #[test]
    fn simple_returns() {
        let r = prices_to_returns(&prices(&[100.0, 110.0, 99.0])).unwrap();
        assert!(close(r.returns()[(0, 0)], 0.10));
        assert!(close(r.returns()[(1, 0)], -0.10));
        assert_eq!(r.dates(), &["2020-01-02".to_string(), "2020-01-03".to_string()]);
    }

    #[test]
    fn constant_prices_give_zero_returns() {
        let r = prices_to_returns(&prices(&[50.0, 50.0, 50.0])).unwrap();
        assert_eq!(r.returns().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn hand_computed_returns() {
        let r = prices_to_returns(&prices(&[1.0, 2.0, 1.0, 3.0])).unwrap();
        assert_eq!(r.returns().as_slice(), &[1.0, -0.5, 2.0]);
    }

    #[test]
    fn rejects_non_positive_price() {
        let err = PricePanel::new(
            vec!["a".into(), "b".into()],
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 3.0]),
            vec!["X".into(), "Y".into()],
        )
        .unwrap_err();
        match err {
            DataError::NonPositivePrice { date, asset, .. } => {
                assert_eq!(date, "b");
                assert_eq!(asset, "X");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_unordered_dates_and_duplicate_assets() {
        let m = DMatrix::from_element(2, 2, 1.0);
        assert!(matches!(
            PricePanel::new(vec!["b".into(), "a".into()], m.clone(), vec!["X".into(), "Y".into()]),
            Err(DataError::UnorderedDates { .. })
        ));
        assert!(matches!(
            PricePanel::new(vec!["a".into(), "b".into()], m, vec!["X".into(), "X".into()]),
            Err(DataError::DuplicateAsset(_))
        ));
    }

    #[test]
    fn csv_with_gap_is_rejected() {
        let src = "date,A,B\n2020-01-01,1,2\n2020-01-02,,2\n";
        assert!(matches!(
            PricePanel::read_csv(src.as_bytes()),
            Err(DataError::Table(TableError::MissingCell { .. }))
        ));
    }

    fn panel_10() -> ReturnPanel {
        ReturnPanel::from_matrix(DMatrix::from_fn(10, 2, |t, j| (t * 2 + j) as f64 * 1e-3)).unwrap()
    }

    #[test]
    fn windows_within_bounds() {
        let p = panel_10();
        let w = rolling_window(&p, &WindowSpec { window_length: 5, cv_holdout: 1, start_index: 0 })
            .unwrap();
        assert_eq!(w.returns(), &p.returns().rows(0, 5).into_owned());
        let w = rolling_window(&p, &WindowSpec { window_length: 5, cv_holdout: 1, start_index: 5 })
            .unwrap();
        assert_eq!(w.returns(), &p.returns().rows(5, 5).into_owned());
        assert_eq!(w.dates()[0], p.dates()[5]);
    }

    #[test]
    fn window_past_end_is_rejected() {
        let p = panel_10();
        assert!(matches!(
            rolling_window(&p, &WindowSpec { window_length: 5, cv_holdout: 1, start_index: 6 }),
            Err(DataError::WindowOutOfBounds { .. })
        ));
        assert!(rolling_window(&p, &WindowSpec { window_length: 5, cv_holdout: 5, start_index: 0 })
            .is_err());
    }

    #[test]
    fn adjacent_windows_overlap_by_len_minus_one() {
        let p = panel_10();
        let a = rolling_window(&p, &WindowSpec { window_length: 4, cv_holdout: 1, start_index: 2 })
            .unwrap();
        let b = rolling_window(&p, &WindowSpec { window_length: 4, cv_holdout: 1, start_index: 3 })
            .unwrap();
        let shared = a.dates().iter().filter(|d| b.dates().contains(d)).count();
        assert_eq!(shared, 3);
        assert_eq!(a.returns().rows(1, 3), b.returns().rows(0, 3));
    }

    #[test]
    fn synth_is_deterministic_and_seed_sensitive() {
        let a = synth_factor_returns(5, 50, 2, 11).unwrap();
        let b = synth_factor_returns(5, 50, 2, 11).unwrap();
        let c = synth_factor_returns(5, 50, 2, 12).unwrap();
        assert_eq!(a.panel, b.panel);
        assert_eq!(a.sigma_true, b.sigma_true);
        assert_ne!(a.panel.returns(), c.panel.returns());
    }

    #[test]
    fn synth_rejects_bad_dimensions() {
        assert!(synth_factor_returns(3, 100, 0, 1).is_err());
        assert!(synth_factor_returns(3, 100, 3, 1).is_err());
        assert!(synth_factor_returns(1, 100, 1, 1).is_err());
        assert!(synth_factor_returns(3, 1, 1, 1).is_err());
    }

    #[test]
    fn business_days_skip_weekends() {
        let d = business_day_labels(6);
        assert_eq!(d[0], "2000-01-03");
        assert_eq!(d[4], "2000-01-07");
        assert_eq!(d[5], "2000-01-10");
    }
}
