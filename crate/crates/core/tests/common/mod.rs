#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

/// `A A' / m + ridge I` with `A` an `n × m` Gaussian matrix; `m < n` gives a
/// rank-deficient part.
pub fn random_psd(rng: &mut ChaCha8Rng, n: usize, m: usize, ridge: f64) -> DMatrix<f64> {
    let a = gaussian_matrix(rng, n, m);
    let mut s = &a * a.transpose() / m as f64;
    for i in 0..n {
        s[(i, i)] += ridge;
    }
    s
}

/// Random covariance on a daily-return scale.
pub fn random_cov(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let scale = 1e-4;
    random_psd(rng, n, n + 3, 0.05) * scale
}

pub fn random_weights_summing_to_one(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    let raw: DVector<f64> = DVector::from_fn(n, |_, _| rng.gen_range(-0.5..1.5));
    let s: f64 = raw.sum();
    if s.abs() < 1e-3 {
        return DVector::from_element(n, 1.0 / n as f64);
    }
    raw / s
}

pub fn quad(sigma: &DMatrix<f64>, w: &DVector<f64>) -> f64 {
    (w.transpose() * sigma * w)[(0, 0)]
}

/// `min ½x'Qx + c'x` subject to `lo <= x <= hi` and `1'x = total`.
pub struct BoxProblem {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
    pub total: f64,
}

impl BoxProblem {
    pub fn random(rng: &mut ChaCha8Rng, m: usize) -> Self {
        let rank = rng.gen_range(1..=m);
        let ridge = if rng.gen_bool(0.5) { 0.0 } else { 0.1 };
        let q = random_psd(rng, m, rank, ridge);
        let c = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let lo = DVector::from_fn(m, |_, _| -rng.gen_range(0.2..1.0));
        let hi = DVector::from_fn(m, |_, _| rng.gen_range(0.2..1.0));
        let total = lo.sum() + rng.gen_range(0.2..0.8) * (hi.sum() - lo.sum());
        Self { q, c, lo, hi, total }
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.q * x)) + self.c.dot(x)
    }

    pub fn to_qp(&self) -> gmv_core::qp::QpProblem {
        let m = self.c.len();
        let mut g = DMatrix::zeros(2 * m, m);
        let mut h = DVector::zeros(2 * m);
        for j in 0..m {
            g[(j, j)] = 1.0;
            h[j] = self.hi[j];
            g[(m + j, j)] = -1.0;
            h[m + j] = -self.lo[j];
        }
        gmv_core::qp::QpProblem::new(
            self.q.clone(),
            self.c.clone(),
            DMatrix::from_element(1, m, 1.0),
            DVector::from_element(1, self.total),
            g,
            h,
        )
        .unwrap()
    }

    /// Zooming grid search. The last coordinate is fixed by the budget; the
    /// others move on a 5-point stencil per axis (all combinations), and the
    /// step halves whenever no stencil point improves.
    pub fn grid_oracle(&self) -> (DVector<f64>, f64) {
        let m = self.c.len();
        let last = m - 1;
        let complete = |free: &[f64]| -> Option<DVector<f64>> {
            let mut x = DVector::zeros(m);
            for (j, v) in free.iter().enumerate() {
                if *v < self.lo[j] || *v > self.hi[j] {
                    return None;
                }
                x[j] = *v;
            }
            let rest = self.total - free.iter().sum::<f64>();
            if rest < self.lo[last] || rest > self.hi[last] {
                return None;
            }
            x[last] = rest;
            Some(x)
        };
        // Feasible start: the same fraction of every box.
        let frac = (self.total - self.lo.sum()) / (self.hi.sum() - self.lo.sum());
        let mut best: Vec<f64> = (0..last).map(|j| self.lo[j] + frac * (self.hi[j] - self.lo[j])).collect();
        let mut best_x = complete(&best).expect("feasible start");
        let mut best_f = self.objective(&best_x);
        let mut step = 0.25 * (0..m).map(|j| self.hi[j] - self.lo[j]).fold(0.0, f64::max);
        let points = 5usize.pow(last as u32);
        while step > 1e-9 {
            let mut improved = false;
            let centre = best.clone();
            let mut trial = vec![0.0; last];
            for code in 0..points {
                let mut c = code;
                for (j, t) in trial.iter_mut().enumerate() {
                    *t = centre[j] + (c % 5) as f64 * step - 2.0 * step;
                    c /= 5;
                }
                if let Some(x) = complete(&trial) {
                    let f = self.objective(&x);
                    if f < best_f - 1e-15 * best_f.abs().max(1.0) {
                        best_f = f;
                        best_x = x;
                        best.copy_from_slice(&trial);
                        improved = true;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        (best_x, best_f)
    }
}

pub fn cov_estimate(matrix: DMatrix<f64>) -> gmv_core::covariance::CovEstimate {
    gmv_core::covariance::CovEstimate {
        matrix,
        estimator: gmv_core::covariance::Estimator::Ml,
        meta: gmv_core::covariance::CovMeta::Sample,
        min_eigenvalue: 0.0,
    }
}

/// Covariance of a one-factor market with loadings around 1, so the
/// unconstrained minimum-variance portfolio holds short positions.
pub fn market_cov(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let beta = DVector::from_fn(n, |_, _| 1.0 + rng.sample::<f64, _>(StandardNormal));
    let idio = DVector::from_fn(n, |_, _| rng.gen_range(0.5..2.0));
    (&beta * beta.transpose() + DMatrix::from_diagonal(&idio)) * 1e-4
}

/// `min w'Σw` with `1'w = 1` and `w >= 0`.
pub fn long_only_qp(sigma: &DMatrix<f64>) -> gmv_core::qp::QpProblem {
    let n = sigma.nrows();
    gmv_core::qp::QpProblem::new(
        sigma * 2.0,
        DVector::zeros(n),
        DMatrix::from_element(1, n, 1.0),
        DVector::from_element(1, 1.0),
        -DMatrix::<f64>::identity(n, n),
        DVector::zeros(n),
    )
    .unwrap()
}

/// `min w'Σw` with `1'w = 1` only.
pub fn budget_only_qp(sigma: &DMatrix<f64>) -> gmv_core::qp::QpProblem {
    let n = sigma.nrows();
    gmv_core::qp::QpProblem::new(
        sigma * 2.0,
        DVector::zeros(n),
        DMatrix::from_element(1, n, 1.0),
        DVector::from_element(1, 1.0),
        DMatrix::zeros(0, n),
        DVector::zeros(0),
    )
    .unwrap()
}
