//! Global minimum-variance portfolios with LASSO and turnover constraints,
//! four covariance estimators, and a daily rolling-window backtest with
//! cross-validated penalty selection.

pub mod backtest;
pub mod covariance;
mod linalg;
pub mod market_data;
pub mod metrics;
pub mod portfolio;
pub mod qp;
pub mod report;
pub mod table;
