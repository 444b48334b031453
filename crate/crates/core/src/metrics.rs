//! Out-of-sample performance measures and the HAC test for a difference in
//! variances between two return series.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::portfolio::PortfolioWeights;

/// Trading days per year used for annualization.
pub const TRADING_DAYS: f64 = 252.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("series too short: {len} < {needed}")]
    TooShort { len: usize, needed: usize },
    #[error("misaligned inputs: {0}")]
    Misaligned(String),
    #[error("empty weight history")]
    Empty,
    #[error("drift failed: {0}")]
    Drift(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceSummary {
    /// Mean squared deviation from the sample mean (denominator = length).
    pub daily_variance: f64,
    pub stddev_daily: f64,
    /// `sqrt(252 * daily_variance)`.
    pub stddev_pa: f64,
}

pub fn oos_variance(returns: &[f64]) -> Result<VarianceSummary, StatsError> {
    if returns.len() < 2 {
        return Err(StatsError::TooShort {
            len: returns.len(),
            needed: 2,
        });
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let daily_variance = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    Ok(VarianceSummary {
        daily_variance,
        stddev_daily: daily_variance.sqrt(),
        stddev_pa: (TRADING_DAYS * daily_variance).sqrt(),
    })
}

/// Weights after one day of returns, renormalized to sum to 1:
/// `w_j (1 + r_j) / (1 + w'r)`.
pub fn drift(w: &DVector<f64>, r_next: &DVector<f64>) -> Result<DVector<f64>, StatsError> {
    if w.len() != r_next.len() {
        return Err(StatsError::Misaligned(format!(
            "{} weights vs {} returns",
            w.len(),
            r_next.len()
        )));
    }
    let growth = 1.0 + w.dot(r_next);
    if !(growth > 0.0) {
        return Err(StatsError::Drift(format!(
            "portfolio return {:.6} wipes out the portfolio",
            growth - 1.0
        )));
    }
    Ok(DVector::from_fn(w.len(), |j, _| w[j] * (1.0 + r_next[j]) / growth))
}

/// Average over rebalances of `Σ_j |w_{t+1,j} - drift(w_t, r_{t+1})_j|`.
///
/// `realized[t]` is the return vector earned by `weights[t]`; the last one is
/// not needed. The sum is divided by `len - 1`.
pub fn avg_turnover(weights: &[DVector<f64>], realized: &[DVector<f64>]) -> Result<f64, StatsError> {
    if weights.len() < 2 {
        return Err(StatsError::TooShort {
            len: weights.len(),
            needed: 2,
        });
    }
    if realized.len() != weights.len() {
        return Err(StatsError::Misaligned(format!(
            "{} weight vectors vs {} return vectors",
            weights.len(),
            realized.len()
        )));
    }
    let mut total = 0.0;
    for t in 0..weights.len() - 1 {
        let drifted = drift(&weights[t], &realized[t])?;
        if weights[t + 1].len() != drifted.len() {
            return Err(StatsError::Misaligned(format!("asset count changes at step {t}")));
        }
        total += (&weights[t + 1] - drifted).lp_norm(1);
    }
    Ok(total / (weights.len() - 1) as f64)
}

pub fn avg_assets(history: &[PortfolioWeights]) -> Result<f64, StatsError> {
    if history.is_empty() {
        return Err(StatsError::Empty);
    }
    let total: usize = history.iter().map(PortfolioWeights::nonzero_count).sum();
    Ok(total as f64 / history.len() as f64)
}

pub fn avg_short_sales(history: &[PortfolioWeights]) -> Result<f64, StatsError> {
    if history.is_empty() {
        return Err(StatsError::Empty);
    }
    let total: usize = history.iter().map(PortfolioWeights::short_count).sum();
    Ok(total as f64 / history.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerformanceReport {
    pub stddev_pa: f64,
    pub stddev_daily: f64,
    pub variance_daily: f64,
    pub turnover_daily: f64,
    pub avg_assets: f64,
    pub avg_short_sales: f64,
    pub pct_of_full_assets: f64,
    pub pct_of_full_short: f64,
}

pub fn performance_report(
    oos_returns: &[f64],
    history: &[PortfolioWeights],
    realized: &[DVector<f64>],
) -> Result<PerformanceReport, StatsError> {
    let var = oos_variance(oos_returns)?;
    let weights: Vec<DVector<f64>> = history.iter().map(|w| w.w.clone()).collect();
    let turnover = avg_turnover(&weights, realized)?;
    let assets = avg_assets(history)?;
    let shorts = avg_short_sales(history)?;
    let n = history[0].n_assets() as f64;
    Ok(PerformanceReport {
        stddev_pa: var.stddev_pa,
        stddev_daily: var.stddev_daily,
        variance_daily: var.daily_variance,
        turnover_daily: turnover,
        avg_assets: assets,
        avg_short_sales: shorts,
        pct_of_full_assets: assets / n * 100.0,
        pct_of_full_short: shorts / n * 100.0,
    })
}

/// Parzen kernel weight.
pub fn parzen(x: f64) -> f64 {
    let a = x.abs();
    if a <= 0.5 {
        1.0 - 6.0 * a * a + 6.0 * a * a * a
    } else if a <= 1.0 {
        2.0 * (1.0 - a).powi(3)
    } else {
        0.0
    }
}

/// `floor(4 (T/100)^(2/9))`.
pub fn default_bandwidth(len: usize) -> usize {
    (4.0 * (len as f64 / 100.0).powf(2.0 / 9.0)).floor() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceTestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub bandwidth: usize,
    /// Set when the long-run variance was not positive; `p_value` is then 1.
    pub degenerate: bool,
}

/// Minimum series length accepted by [`hac_variance_test`].
pub const HAC_MIN_LEN: usize = 30;

pub fn hac_variance_test(a: &[f64], b: &[f64]) -> Result<VarianceTestResult, StatsError> {
    hac_variance_test_with(a, b, None)
}

/// Two-sided test of `Var(a) = Var(b)` on `v_t = (a_t - ā)² - (b_t - b̄)²`
/// with a Parzen-kernel long-run variance.
pub fn hac_variance_test_with(
    a: &[f64],
    b: &[f64],
    bandwidth: Option<usize>,
) -> Result<VarianceTestResult, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::Misaligned(format!("{} vs {} observations", a.len(), b.len())));
    }
    if a.len() < HAC_MIN_LEN {
        return Err(StatsError::TooShort {
            len: a.len(),
            needed: HAC_MIN_LEN,
        });
    }
    let t = a.len();
    let tf = t as f64;
    let mean_a = a.iter().sum::<f64>() / tf;
    let mean_b = b.iter().sum::<f64>() / tf;
    let v: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - mean_a) * (x - mean_a) - (y - mean_b) * (y - mean_b))
        .collect();
    let mean_v = v.iter().sum::<f64>() / tf;
    let centered: Vec<f64> = v.iter().map(|x| x - mean_v).collect();
    let lags = bandwidth.unwrap_or_else(|| default_bandwidth(t)).min(t - 1);
    let autocov = |l: usize| -> f64 {
        centered[l..].iter().zip(&centered[..t - l]).map(|(x, y)| x * y).sum::<f64>() / tf
    };
    let mut lrv = autocov(0);
    if lags > 0 {
        for l in 1..=lags {
            lrv += 2.0 * parzen(l as f64 / lags as f64) * autocov(l);
        }
    }
    if !(lrv > 0.0) {
        if mean_v != 0.0 {
            log::warn!("HAC long-run variance is not positive ({lrv:e}); reporting p = 1");
        }
        return Ok(VarianceTestResult {
            statistic: 0.0,
            p_value: 1.0,
            bandwidth: lags,
            degenerate: true,
        });
    }
    let statistic = mean_v / (lrv / tf).sqrt();
    let p_value = erfc(statistic.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0);
    Ok(VarianceTestResult {
        statistic,
        p_value,
        bandwidth: lags,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::portfolio::ModelKind;

    fn weights(values: &[f64]) -> PortfolioWeights {
        let w = DVector::from_column_slice(values);
        PortfolioWeights {
            delta: w.lp_norm(1),
            w,
            model: ModelKind::Lasso,
            lambda: 0.0,
            date: String::new(),
        }
    }

    #[test]
    fn variance_of_constant_series_is_zero() {
        assert_eq!(oos_variance(&[0.01; 5]).unwrap().daily_variance, 0.0);
    }

    #[test]
    fn two_point_series_variance() {
        let x = 0.02;
        let s: Vec<f64> = (0..10).map(|i| if i % 2 == 0 { x } else { -x }).collect();
        assert!((oos_variance(&s).unwrap().daily_variance - x * x).abs() < 1e-18);
    }

    #[test]
    fn hand_computed_variance() {
        // mean 0.015, squared deviations 2.5e-5, 2.25e-4, 2.5e-5, 2.25e-4 -> 5e-4 / 4
        let v = oos_variance(&[0.01, 0.03, 0.02, 0.00]).unwrap();
        assert!((v.daily_variance - 1.25e-4).abs() < 1e-18);
        assert!((v.stddev_pa - (252.0f64 * 1.25e-4).sqrt()).abs() < 1e-15);
        assert!(oos_variance(&[0.1]).is_err());
    }

    #[test]
    fn drift_examples() {
        let w = DVector::from_vec(vec![0.5, 0.5]);
        assert_eq!(drift(&w, &DVector::zeros(2)).unwrap(), w);
        let d = drift(&w, &DVector::from_vec(vec![0.1, -0.1])).unwrap();
        assert!((d[0] - 0.55).abs() < 1e-15 && (d[1] - 0.45).abs() < 1e-15);
        let single = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(drift(&single, &DVector::from_vec(vec![0.3, -0.2])).unwrap(), single);
        let short = DVector::from_vec(vec![2.0, -1.0]);
        assert!(drift(&short, &DVector::from_vec(vec![-0.6, 0.5])).is_err());
    }

    #[test]
    fn turnover_examples() {
        let a = DVector::from_vec(vec![0.5, 0.5]);
        let b = DVector::from_vec(vec![0.6, 0.4]);
        let zero = DVector::zeros(2);
        assert_eq!(avg_turnover(&[a.clone(), a.clone(), a.clone()], &[zero.clone(), zero.clone(), zero.clone()]).unwrap(), 0.0);
        let t = avg_turnover(&[a.clone(), b], &[zero.clone(), zero.clone()]).unwrap();
        assert!((t - 0.2).abs() < 1e-15);
        assert!(avg_turnover(&[a.clone(), a], &[zero]).is_err());
    }

    #[test]
    fn asset_and_short_counts() {
        let equal = vec![weights(&[0.01; 100]); 3];
        assert_eq!(avg_assets(&equal).unwrap(), 100.0);
        assert_eq!(avg_short_sales(&equal).unwrap(), 0.0);

        let alternating: Vec<PortfolioWeights> = (0..6)
            .map(|i| {
                if i % 2 == 0 {
                    weights(&[0.2, 0.3, 0.5, 0.0, 0.0])
                } else {
                    weights(&[0.2, 0.2, 0.2, 0.2, 0.2])
                }
            })
            .collect();
        assert_eq!(avg_assets(&alternating).unwrap(), 4.0);

        let shorted = vec![weights(&[0.6, 0.6, -0.2]); 4];
        assert_eq!(avg_assets(&shorted).unwrap(), 3.0);
        assert_eq!(avg_short_sales(&shorted).unwrap(), 1.0);
        assert_eq!(avg_assets(&[]), Err(StatsError::Empty));
    }

    #[test]
    fn parzen_kernel_shape() {
        assert_eq!(parzen(0.0), 1.0);
        assert_eq!(parzen(1.0), 0.0);
        assert_eq!(parzen(0.5), 0.25);
        assert_eq!(2.0 * (1.0f64 - 0.5).powi(3), 0.25);
        assert_eq!(parzen(1.5), 0.0);
        assert_eq!(parzen(-0.3), parzen(0.3));
    }

    #[test]
    fn identical_series_give_p_one() {
        let a: Vec<f64> = (0..100).map(|i| ((i * 37) % 11) as f64 * 1e-3).collect();
        let r = hac_variance_test(&a, &a).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn swapping_series_negates_statistic() {
        let a: Vec<f64> = (0..200).map(|i| ((i * 37) % 11) as f64 * 1e-3).collect();
        let b: Vec<f64> = (0..200).map(|i| ((i * 17) % 7) as f64 * 2e-3).collect();
        let ab = hac_variance_test(&a, &b).unwrap();
        let ba = hac_variance_test(&b, &a).unwrap();
        assert_eq!(ab.statistic, -ba.statistic);
        assert_eq!(ab.p_value, ba.p_value);
    }

    #[test]
    fn hac_input_validation() {
        let a = vec![0.0; 40];
        assert!(matches!(hac_variance_test(&a, &a[..39]), Err(StatsError::Misaligned(_))));
        assert!(matches!(hac_variance_test(&a[..20], &a[..20]), Err(StatsError::TooShort { .. })));
        assert_eq!(default_bandwidth(2000), 7);
    }
}
