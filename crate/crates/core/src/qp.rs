//! Dense convex quadratic programming.
//!
//! ```text
//! minimize    ½ x'Qx + c'x
//! subject to  E x  = e
//!             G x <= h
//! ```
//!
//! Solved by a primal active-set method. Each iteration minimizes the
//! objective over the current working set using a null-space
//! factorization: single-variable inequality rows (bounds) simply pin their
//! variable, and the remaining working rows are factored by Householder QR
//! on the free variables. The reduced Hessian may be singular (the
//! positive/negative weight split used by the portfolio models is rank
//! deficient by construction), so zero-curvature directions are followed as
//! descent directions until a constraint blocks them.
//!
//! A feasible starting point may be supplied. Otherwise one is found by a
//! phase-1 problem minimizing the largest inequality violation; a positive
//! phase-1 optimum certifies infeasibility.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{cholesky, cholesky_solve, clip_psd, is_psd_pivoted, symmetrize};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite problem data")]
    NonFinite,
    #[error("quadratic term is not positive semi-definite (smallest eigenvalue {min_eigenvalue:e}, largest {max_eigenvalue:e})")]
    NotConvex {
        min_eigenvalue: f64,
        max_eigenvalue: f64,
    },
    #[error("equality constraints are linearly dependent")]
    DependentEqualities,
    #[error("invalid settings: {0}")]
    Settings(String),
    #[error("objective is unbounded below on the feasible set")]
    Unbounded,
    #[error("working set became numerically dependent")]
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub tolerance: f64,
    pub max_iter: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iter: 50_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
    /// Multipliers `y` of `Ex = e` in `Qx + c + E'y + G'z = 0`.
    pub eq_multipliers: DVector<f64>,
    /// Multipliers `z >= 0` of `Gx <= h`.
    pub ineq_multipliers: DVector<f64>,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    q: DMatrix<f64>,
    c: DVector<f64>,
    e_mat: DMatrix<f64>,
    e_vec: DVector<f64>,
    g_mat: DMatrix<f64>,
    h_vec: DVector<f64>,
    /// For inequality rows with a single nonzero: `(variable, coefficient)`.
    bound_rows: Vec<Option<(usize, f64)>>,
}

impl QpProblem {
    /// Validates dimensions and convexity. `Q` is symmetrized; tiny negative
    /// eigenvalues (down to `-1e-8` times the largest) are clipped to zero.
    pub fn new(
        q: DMatrix<f64>,
        c: DVector<f64>,
        e_mat: DMatrix<f64>,
        e_vec: DVector<f64>,
        g_mat: DMatrix<f64>,
        h_vec: DVector<f64>,
    ) -> Result<Self, QpError> {
        let m = c.len();
        if q.nrows() != m || q.ncols() != m {
            return Err(QpError::Dimension(format!("Q is {}x{}, c has {m}", q.nrows(), q.ncols())));
        }
        if e_mat.ncols() != m || e_mat.nrows() != e_vec.len() {
            return Err(QpError::Dimension(format!(
                "E is {}x{}, e has {}",
                e_mat.nrows(),
                e_mat.ncols(),
                e_vec.len()
            )));
        }
        if g_mat.ncols() != m || g_mat.nrows() != h_vec.len() {
            return Err(QpError::Dimension(format!(
                "G is {}x{}, h has {}",
                g_mat.nrows(),
                g_mat.ncols(),
                h_vec.len()
            )));
        }
        let all_finite = q.iter().chain(c.iter()).chain(e_mat.iter()).chain(e_vec.iter()).chain(g_mat.iter())
            .all(|v| v.is_finite())
            && h_vec.iter().all(|v| !v.is_nan() && *v != f64::NEG_INFINITY);
        if !all_finite {
            return Err(QpError::NonFinite);
        }

        let mut q = q;
        symmetrize(&mut q);
        if !is_psd_pivoted(&q, 1e-10) {
            let (clipped, min) = clip_psd(q.clone());
            let max = crate::linalg::sorted_eigen(&q).0[0];
            if min < -1e-8 * max.abs().max(f64::MIN_POSITIVE) {
                return Err(QpError::NotConvex {
                    min_eigenvalue: min,
                    max_eigenvalue: max,
                });
            }
            q = clipped;
        }

        let bound_rows = (0..g_mat.nrows())
            .map(|i| {
                let mut found = None;
                for j in 0..m {
                    let a = g_mat[(i, j)];
                    if a != 0.0 {
                        if found.is_some() {
                            return None;
                        }
                        found = Some((j, a));
                    }
                }
                found
            })
            .collect();

        Ok(Self {
            q,
            c,
            e_mat,
            e_vec,
            g_mat,
            h_vec,
            bound_rows,
        })
    }

    /// Same constraints and quadratic term with a new linear cost.
    pub fn with_linear_cost(&self, c: DVector<f64>) -> Result<Self, QpError> {
        if c.len() != self.dim() {
            return Err(QpError::Dimension(format!("c has {}, expected {}", c.len(), self.dim())));
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(QpError::NonFinite);
        }
        Ok(Self { c, ..self.clone() })
    }

    pub fn dim(&self) -> usize {
        self.c.len()
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn eq_matrix(&self) -> &DMatrix<f64> {
        &self.e_mat
    }

    pub fn eq_rhs(&self) -> &DVector<f64> {
        &self.e_vec
    }

    pub fn ineq_matrix(&self) -> &DMatrix<f64> {
        &self.g_mat
    }

    pub fn ineq_rhs(&self) -> &DVector<f64> {
        &self.h_vec
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.q * x)) + self.c.dot(x)
    }

    /// Largest violation of `Ex = e` or `Gx <= h`.
    pub fn infeasibility(&self, x: &DVector<f64>) -> f64 {
        let eq = if self.e_vec.is_empty() {
            0.0
        } else {
            (&self.e_mat * x - &self.e_vec).amax()
        };
        let ineq = (&self.g_mat * x - &self.h_vec)
            .iter()
            .fold(0.0f64, |acc, v| acc.max(*v));
        eq.max(ineq)
    }

    /// KKT residual of a primal/dual triple: the largest of primal
    /// infeasibility, stationarity, dual infeasibility and complementarity.
    pub fn kkt_residual(&self, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>) -> f64 {
        let mut grad = &self.q * x + &self.c;
        if !y.is_empty() {
            grad += self.e_mat.tr_mul(y);
        }
        if !z.is_empty() {
            grad += self.g_mat.tr_mul(z);
        }
        let stationarity = grad.amax();
        let dual = z.iter().fold(0.0f64, |acc, v| acc.max(-v));
        let slack = &self.h_vec - &self.g_mat * x;
        let comp = z
            .iter()
            .zip(slack.iter())
            .fold(0.0f64, |acc, (zi, si)| if *zi == 0.0 { acc } else { acc.max((zi * si).abs()) });
        self.infeasibility(x).max(stationarity).max(dual).max(comp)
    }
}

pub fn solve_qp(problem: &QpProblem, tolerance: f64, max_iter: usize) -> Result<QpSolution, QpError> {
    solve_qp_with(problem, &QpSettings { tolerance, max_iter }, None)
}

/// Solves from `start` when it is feasible (within a tiny margin), otherwise
/// from a phase-1 point.
pub fn solve_qp_with(
    problem: &QpProblem,
    settings: &QpSettings,
    start: Option<&DVector<f64>>,
) -> Result<QpSolution, QpError> {
    if !(settings.tolerance > 0.0) || settings.max_iter == 0 {
        return Err(QpError::Settings(format!(
            "tolerance {} and max_iter {} must be positive",
            settings.tolerance, settings.max_iter
        )));
    }
    let m = problem.dim();
    if let Some(x0) = start {
        if x0.len() != m {
            return Err(QpError::Dimension(format!("start has {}, expected {m}", x0.len())));
        }
    }

    let feas_margin = 1e-12 * (1.0 + problem.h_vec.iter().filter(|v| v.is_finite()).fold(0.0f64, |a, v| a.max(v.abs())));
    let mut iterations = 0;
    let x0 = match start {
        Some(x0) if problem.infeasibility(x0) <= feas_margin => x0.clone(),
        _ => match phase_one(problem, settings, &mut iterations)? {
            Some(x) => x,
            None => {
                let x = least_norm_equality_point(problem)?;
                let z = DVector::zeros(problem.h_vec.len());
                let y = DVector::zeros(problem.e_vec.len());
                return Ok(QpSolution {
                    objective: problem.objective(&x),
                    kkt_residual: problem.kkt_residual(&x, &y, &z),
                    x,
                    status: QpStatus::Infeasible,
                    iterations,
                    eq_multipliers: y,
                    ineq_multipliers: z,
                });
            }
        },
    };

    let mut solver = ActiveSet::new(problem, x0)?;
    let outcome = solver.run(settings.max_iter.saturating_sub(iterations))?;
    iterations += solver.iterations;
    let (y, z) = solver.multipliers_full()?;
    let x = solver.x;
    let kkt = problem.kkt_residual(&x, &y, &z);
    let status = match outcome {
        Outcome::Converged if kkt <= settings.tolerance => QpStatus::Optimal,
        _ => QpStatus::MaxIterations,
    };
    Ok(QpSolution {
        objective: problem.objective(&x),
        x,
        status,
        kkt_residual: kkt,
        iterations,
        eq_multipliers: y,
        ineq_multipliers: z,
    })
}

/// Minimum-norm solution of `Ex = e` (zero when there are no equalities).
fn least_norm_equality_point(problem: &QpProblem) -> Result<DVector<f64>, QpError> {
    let m = problem.dim();
    if problem.e_vec.is_empty() {
        return Ok(DVector::zeros(m));
    }
    let gram = &problem.e_mat * problem.e_mat.transpose();
    let l = cholesky(&gram, 1e-13).ok_or(QpError::DependentEqualities)?;
    let y = cholesky_solve(&l, &problem.e_vec);
    Ok(problem.e_mat.tr_mul(&y))
}

/// Phase 1: minimize `t` subject to `Ex = e`, `Gx - t <= h`, `t >= 0`.
/// Returns `None` when the optimum `t` certifies infeasibility.
fn phase_one(
    problem: &QpProblem,
    settings: &QpSettings,
    iterations: &mut usize,
) -> Result<Option<DVector<f64>>, QpError> {
    let m = problem.dim();
    let x_eq = least_norm_equality_point(problem)?;
    let viol = (&problem.g_mat * &x_eq - &problem.h_vec)
        .iter()
        .fold(0.0f64, |acc, v| acc.max(*v));
    if viol <= 0.0 {
        return Ok(Some(x_eq));
    }
    let p = problem.e_vec.len();
    let q = problem.h_vec.len();
    let mut e_aug = DMatrix::zeros(p, m + 1);
    e_aug.columns_mut(0, m).copy_from(&problem.e_mat);
    let mut g_aug = DMatrix::zeros(q + 1, m + 1);
    g_aug.view_mut((0, 0), (q, m)).copy_from(&problem.g_mat);
    for i in 0..q {
        g_aug[(i, m)] = -1.0;
    }
    g_aug[(q, m)] = -1.0;
    let mut h_aug = DVector::zeros(q + 1);
    h_aug.rows_mut(0, q).copy_from(&problem.h_vec);
    let mut c_aug = DVector::zeros(m + 1);
    c_aug[m] = 1.0;
    let aux = QpProblem::new(DMatrix::zeros(m + 1, m + 1), c_aug, e_aug, problem.e_vec.clone(), g_aug, h_aug)?;
    let mut start = DVector::zeros(m + 1);
    start.rows_mut(0, m).copy_from(&x_eq);
    start[m] = viol;

    let mut solver = ActiveSet::new(&aux, start)?;
    solver.run(settings.max_iter)?;
    *iterations += solver.iterations;
    let t = solver.x[m];
    let scale = 1.0 + problem.h_vec.iter().filter(|v| v.is_finite()).fold(0.0f64, |a, v| a.max(v.abs()));
    if t > settings.tolerance.min(1e-9) * scale {
        return Ok(None);
    }
    Ok(Some(solver.x.rows(0, m).into_owned()))
}

enum Outcome {
    Converged,
    IterationLimit,
}

/// Householder factorization of the working general rows restricted to the
/// free variables: `A_F' = H_0 H_1 ... H_{r-1} [R; 0]`.
struct Factor {
    free: Vec<usize>,
    rows: Vec<GeneralRow>,
    reflectors: Vec<(DVector<f64>, f64)>,
    r: DMatrix<f64>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum GeneralRow {
    Eq(usize),
    Ineq(usize),
}

impl Factor {
    fn rank(&self) -> usize {
        self.rows.len()
    }

    /// Applies `H_{r-1} ... H_0` (i.e. `Qh'`) to a free-space vector.
    fn apply_qt(&self, v: &mut DVector<f64>) {
        for (k, (h, beta)) in self.reflectors.iter().enumerate() {
            let mut tail = v.rows_mut(k, h.len());
            let s = h.dot(&tail) * beta;
            tail.axpy(-s, h, 1.0);
        }
    }

    /// Applies `Qh = H_0 ... H_{r-1}` to a free-space vector.
    fn apply_q(&self, v: &mut DVector<f64>) {
        for (k, (h, beta)) in self.reflectors.iter().enumerate().rev() {
            let mut tail = v.rows_mut(k, h.len());
            let s = h.dot(&tail) * beta;
            tail.axpy(-s, h, 1.0);
        }
    }

    /// `Qh' M Qh` for a symmetric free-space matrix.
    fn congruence(&self, mut m: DMatrix<f64>) -> DMatrix<f64> {
        let f = m.nrows();
        for (k, (h, beta)) in self.reflectors.iter().enumerate() {
            let len = h.len();
            let mut v = DVector::zeros(f);
            v.rows_mut(k, len).copy_from(h);
            let w = &m * &v;
            let s = v.dot(&w);
            // M <- M - b v w' - b w v' + b^2 s v v'
            let wt = &w - &v * (0.5 * beta * s);
            m.ger(-beta, &v, &wt, 1.0);
            m.ger(-beta, &wt, &v, 1.0);
        }
        m
    }
}

struct ActiveSet<'a> {
    p: &'a QpProblem,
    x: DVector<f64>,
    /// Per variable: the bound row pinning it.
    fixed: Vec<Option<usize>>,
    active_general: Vec<usize>,
    in_working: Vec<bool>,
    iterations: usize,
    qscale: f64,
}

impl<'a> ActiveSet<'a> {
    fn new(p: &'a QpProblem, x: DVector<f64>) -> Result<Self, QpError> {
        let m = p.dim();
        let q = p.h_vec.len();
        let qscale = p.q.amax();
        let mut s = Self {
            p,
            x,
            fixed: vec![None; m],
            active_general: Vec::new(),
            in_working: vec![false; q],
            iterations: 0,
            qscale,
        };
        if s.factor().is_none() {
            return Err(QpError::DependentEqualities);
        }
        // Seed the working set with constraints active at the start point,
        // keeping it linearly independent.
        let gx = &p.g_mat * &s.x;
        for i in 0..q {
            let scale = 1.0 + p.h_vec[i].abs();
            if (p.h_vec[i] - gx[i]).abs() > 1e-13 * scale {
                continue;
            }
            match p.bound_rows[i] {
                Some((var, _)) => {
                    if s.fixed[var].is_some() {
                        continue;
                    }
                    s.fixed[var] = Some(i);
                    if s.factor().is_none() {
                        s.fixed[var] = None;
                        continue;
                    }
                }
                None => {
                    s.active_general.push(i);
                    if s.factor().is_none() {
                        s.active_general.pop();
                        continue;
                    }
                }
            }
            s.in_working[i] = true;
        }
        Ok(s)
    }

    fn row_coef(&self, row: GeneralRow, var: usize) -> f64 {
        match row {
            GeneralRow::Eq(i) => self.p.e_mat[(i, var)],
            GeneralRow::Ineq(i) => self.p.g_mat[(i, var)],
        }
    }

    fn factor(&self) -> Option<Factor> {
        let free: Vec<usize> = (0..self.p.dim()).filter(|&j| self.fixed[j].is_none()).collect();
        let rows: Vec<GeneralRow> = (0..self.p.e_vec.len())
            .map(GeneralRow::Eq)
            .chain(self.active_general.iter().map(|&i| GeneralRow::Ineq(i)))
            .collect();
        let f = free.len();
        let r = rows.len();
        if r > f {
            return None;
        }
        let mut a = DMatrix::from_fn(f, r, |i, k| self.row_coef(rows[k], free[i]));
        let col_scale = (0..r)
            .map(|k| {
                rows.get(k)
                    .map(|&row| (0..self.p.dim()).map(|j| self.row_coef(row, j).abs()).fold(0.0, f64::max))
                    .unwrap_or(0.0)
            })
            .collect::<Vec<_>>();
        let mut reflectors = Vec::with_capacity(r);
        for k in 0..r {
            let x = a.view((k, k), (f - k, 1)).column(0).into_owned();
            let norm = x.norm();
            if !(norm > 1e-10 * col_scale[k]) {
                return None;
            }
            let alpha = if x[0] >= 0.0 { -norm } else { norm };
            let mut v = x;
            v[0] -= alpha;
            let vnorm2 = v.norm_squared();
            let beta = if vnorm2 > 0.0 { 2.0 / vnorm2 } else { 0.0 };
            for col in k..r {
                let mut tail = a.view_mut((k, col), (f - k, 1));
                let s = v.dot(&tail.column(0)) * beta;
                tail.column_mut(0).axpy(-s, &v, 1.0);
            }
            reflectors.push((v, beta));
        }
        let rmat = a.view((0, 0), (r, r)).upper_triangle();
        Some(Factor {
            free,
            rows,
            reflectors,
            r: rmat,
        })
    }

    fn gradient(&self) -> DVector<f64> {
        &self.p.q * &self.x + &self.p.c
    }

    /// Step minimizing the objective over the working set. The flag marks a
    /// zero-curvature descent direction (no natural step length).
    fn step(&self, fac: &Factor, grad: &DVector<f64>) -> (DVector<f64>, bool) {
        let m = self.p.dim();
        let f = fac.free.len();
        let r = fac.rank();
        let mut p_full = DVector::zeros(m);
        if f == r {
            return (p_full, false);
        }
        let mut g_f = DVector::from_fn(f, |i, _| grad[fac.free[i]]);
        fac.apply_qt(&mut g_f);
        let q_ff = DMatrix::from_fn(f, f, |i, j| self.p.q[(fac.free[i], fac.free[j])]);
        let qt = fac.congruence(q_ff);
        let dz = f - r;
        let mut hz = qt.view((r, r), (dz, dz)).into_owned();
        symmetrize(&mut hz);
        let gz = g_f.rows(r, dz).into_owned();

        let (u, unbounded) = match cholesky(&hz, 1e-13) {
            Some(l) => (-cholesky_solve(&l, &gz), false),
            None => self.singular_step(hz, &gz, grad.amax()),
        };
        let mut pf = DVector::zeros(f);
        pf.rows_mut(r, dz).copy_from(&u);
        fac.apply_q(&mut pf);
        for (i, &j) in fac.free.iter().enumerate() {
            p_full[j] = pf[i];
        }
        (p_full, unbounded)
    }

    fn singular_step(&self, hz: DMatrix<f64>, gz: &DVector<f64>, gscale: f64) -> (DVector<f64>, bool) {
        let dz = hz.nrows();
        let hmax = hz.amax();
        if hmax <= 1e-14 * self.qscale.max(f64::MIN_POSITIVE) || hmax == 0.0 {
            if gz.amax() > 1e-9 * gscale {
                return (-gz.clone(), true);
            }
            return (DVector::zeros(dz), false);
        }
        let eig = SymmetricEigen::new(hz);
        let top = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let mut null_part = DVector::zeros(dz);
        let mut range_step = DVector::zeros(dz);
        for i in 0..dz {
            let v = eig.eigenvectors.column(i);
            let coef = v.dot(gz);
            if eig.eigenvalues[i] <= 1e-11 * top {
                null_part.axpy(coef, &v, 1.0);
            } else {
                range_step.axpy(-coef / eig.eigenvalues[i], &v, 1.0);
            }
        }
        if null_part.amax() > 1e-9 * gscale {
            (-null_part, true)
        } else {
            (range_step, false)
        }
    }

    /// Multipliers of the working rows: general rows from `R mu = -(Qh' g)_r`,
    /// bound rows from the stationarity of their pinned variable.
    fn working_multipliers(&self, fac: &Factor, grad: &DVector<f64>) -> (Vec<f64>, Vec<(usize, f64)>) {
        let f = fac.free.len();
        let r = fac.rank();
        let mut g_f = DVector::from_fn(f, |i, _| grad[fac.free[i]]);
        fac.apply_qt(&mut g_f);
        let mut mu = vec![0.0; r];
        for i in (0..r).rev() {
            let mut s = -g_f[i];
            for k in (i + 1)..r {
                s -= fac.r[(i, k)] * mu[k];
            }
            mu[i] = s / fac.r[(i, i)];
        }
        let mut bounds = Vec::new();
        for (var, slot) in self.fixed.iter().enumerate() {
            if let Some(row) = *slot {
                let coef = self.p.bound_rows[row].expect("bound row").1;
                let mut s = grad[var];
                for (k, &gr) in fac.rows.iter().enumerate() {
                    s += mu[k] * self.row_coef(gr, var);
                }
                bounds.push((row, -s / coef));
            }
        }
        (mu, bounds)
    }

    fn multipliers_full(&self) -> Result<(DVector<f64>, DVector<f64>), QpError> {
        let fac = self.factor().ok_or(QpError::Degenerate)?;
        let grad = self.gradient();
        let (mu, bounds) = self.working_multipliers(&fac, &grad);
        let mut y = DVector::zeros(self.p.e_vec.len());
        let mut z = DVector::zeros(self.p.h_vec.len());
        for (k, row) in fac.rows.iter().enumerate() {
            match *row {
                GeneralRow::Eq(i) => y[i] = mu[k],
                GeneralRow::Ineq(i) => z[i] = mu[k],
            }
        }
        for (row, val) in bounds {
            z[row] = val;
        }
        Ok((y, z))
    }

    fn run(&mut self, max_iter: usize) -> Result<Outcome, QpError> {
        let mut at_min = false;
        let cscale = self.p.c.amax();
        while self.iterations < max_iter {
            self.iterations += 1;
            let fac = self.factor().ok_or(QpError::Degenerate)?;
            let grad = self.gradient();

            if !at_min {
                let (p, unbounded) = self.step(&fac, &grad);
                let pmax = p.amax();
                if pmax > 1e-14 * (1.0 + self.x.amax()) || unbounded {
                    let (alpha, blocking) = self.ratio_test(&p, unbounded);
                    match blocking {
                        Some(row) => {
                            self.x.axpy(alpha, &p, 1.0);
                            self.add_constraint(row);
                        }
                        None if unbounded => return Err(QpError::Unbounded),
                        None => {
                            self.x += p;
                            at_min = true;
                        }
                    }
                    continue;
                }
            }

            let (mu, bounds) = self.working_multipliers(&fac, &grad);
            let dual_tol = 1e-12 * (grad.amax() + cscale + self.qscale * self.x.amax()).max(f64::MIN_POSITIVE);
            let mut worst: Option<(usize, f64)> = None;
            for (k, row) in fac.rows.iter().enumerate() {
                if let GeneralRow::Ineq(i) = *row {
                    if mu[k] < -dual_tol && worst.map_or(true, |(_, w)| mu[k] < w) {
                        worst = Some((i, mu[k]));
                    }
                }
            }
            for &(row, val) in &bounds {
                if val < -dual_tol && worst.map_or(true, |(_, w)| val < w) {
                    worst = Some((row, val));
                }
            }
            match worst {
                None => return Ok(Outcome::Converged),
                Some((row, _)) => {
                    self.remove_constraint(row);
                    at_min = false;
                }
            }
        }
        Ok(Outcome::IterationLimit)
    }

    /// Longest feasible step along `p`, capped at 1 unless `p` is a
    /// zero-curvature direction. Returns the blocking inequality, if any.
    fn ratio_test(&self, p: &DVector<f64>, uncapped: bool) -> (f64, Option<usize>) {
        let pmax = p.amax();
        let mut best = f64::INFINITY;
        let mut block = None;
        for i in 0..self.p.h_vec.len() {
            if self.in_working[i] || self.p.h_vec[i] == f64::INFINITY {
                continue;
            }
            let (ap, ax, anorm) = match self.p.bound_rows[i] {
                Some((var, coef)) => (coef * p[var], coef * self.x[var], coef.abs()),
                None => {
                    let row = self.p.g_mat.row(i);
                    let mut ap = 0.0;
                    let mut ax = 0.0;
                    let mut an = 0.0f64;
                    for j in 0..row.len() {
                        ap += row[j] * p[j];
                        ax += row[j] * self.x[j];
                        an = an.max(row[j].abs());
                    }
                    (ap, ax, an)
                }
            };
            if ap <= 1e-13 * anorm * pmax {
                continue;
            }
            let alpha = ((self.p.h_vec[i] - ax) / ap).max(0.0);
            if alpha < best {
                best = alpha;
                block = Some(i);
            }
        }
        if uncapped || best <= 1.0 {
            (best, block)
        } else {
            (1.0, None)
        }
    }

    fn add_constraint(&mut self, row: usize) {
        self.in_working[row] = true;
        match self.p.bound_rows[row] {
            Some((var, coef)) => {
                self.fixed[var] = Some(row);
                self.x[var] = self.p.h_vec[row] / coef;
            }
            None => self.active_general.push(row),
        }
    }

    fn remove_constraint(&mut self, row: usize) {
        self.in_working[row] = false;
        match self.p.bound_rows[row] {
            Some((var, _)) => self.fixed[var] = None,
            None => self.active_general.retain(|&r| r != row),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    fn vector(data: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(data)
    }

    fn empty_rows(m: usize) -> (DMatrix<f64>, DVector<f64>) {
        (DMatrix::zeros(0, m), DVector::zeros(0))
    }

    #[test]
    fn equality_pins_the_only_variable() {
        let (g, h) = empty_rows(1);
        let p = QpProblem::new(dense(1, 1, &[2.0]), vector(&[0.0]), dense(1, 1, &[1.0]), vector(&[1.0]), g, h)
            .unwrap();
        let s = solve_qp(&p, 1e-8, 100).unwrap();
        assert!(s.is_optimal());
        assert!((s.x[0] - 1.0).abs() < 1e-12);
        assert!((s.objective - 1.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_split() {
        let (g, h) = empty_rows(2);
        let p = QpProblem::new(
            DMatrix::identity(2, 2) * 2.0,
            vector(&[0.0, 0.0]),
            dense(1, 2, &[1.0, 1.0]),
            vector(&[1.0]),
            g,
            h,
        )
        .unwrap();
        let s = solve_qp(&p, 1e-8, 100).unwrap();
        assert!(s.is_optimal());
        assert!((s.x[0] - 0.5).abs() < 1e-12 && (s.x[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn weighted_split_with_nonnegativity() {
        // minimize x'diag(1,4)x on the simplex; grid search over x1 in [0, 1]
        // at step 1e-4 gives x1 = 0.8.
        let q = dense(2, 2, &[2.0, 0.0, 0.0, 8.0]);
        let p = QpProblem::new(
            q,
            vector(&[0.0, 0.0]),
            dense(1, 2, &[1.0, 1.0]),
            vector(&[1.0]),
            -DMatrix::identity(2, 2),
            vector(&[0.0, 0.0]),
        )
        .unwrap();
        let oracle = (0..=10_000)
            .map(|i| i as f64 * 1e-4)
            .min_by(|a, b| {
                let fa = a * a + 4.0 * (1.0 - a) * (1.0 - a);
                let fb = b * b + 4.0 * (1.0 - b) * (1.0 - b);
                fa.total_cmp(&fb)
            })
            .unwrap();
        assert!((oracle - 0.8).abs() < 1e-9);
        let s = solve_qp(&p, 1e-8, 100).unwrap();
        assert!(s.is_optimal());
        assert!((s.x[0] - 0.8).abs() < 1e-10 && (s.x[1] - 0.2).abs() < 1e-10);
        assert!(s.kkt_residual <= 1e-8);
    }

    #[test]
    fn active_bound_from_phase_one() {
        // minimize (x1 - 2)^2 + (x2 + 1)^2 with 0 <= x <= 1 and no equalities.
        let q = DMatrix::identity(2, 2) * 2.0;
        let c = vector(&[-4.0, 2.0]);
        let g = dense(4, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0]);
        let h = vector(&[1.0, 1.0, -0.25, 0.0]);
        let (e, ev) = empty_rows(2);
        let p = QpProblem::new(q, c, e, ev, g, h).unwrap();
        let s = solve_qp(&p, 1e-8, 100).unwrap();
        assert!(s.is_optimal());
        assert!((s.x[0] - 1.0).abs() < 1e-12 && s.x[1].abs() < 1e-12);
        assert!(s.ineq_multipliers.iter().all(|&z| z >= 0.0));
    }

    #[test]
    fn infeasible_problem_is_reported() {
        // x1 + x2 = 1 with x1 <= 0.2 and x2 <= 0.2.
        let p = QpProblem::new(
            DMatrix::identity(2, 2),
            vector(&[0.0, 0.0]),
            dense(1, 2, &[1.0, 1.0]),
            vector(&[1.0]),
            DMatrix::identity(2, 2),
            vector(&[0.2, 0.2]),
        )
        .unwrap();
        let s = solve_qp(&p, 1e-8, 1000).unwrap();
        assert_eq!(s.status, QpStatus::Infeasible);
    }

    #[test]
    fn zero_curvature_direction_is_followed() {
        // Split form of min w^2 + lambda |w| with w = 1: Q singular.
        let q = dense(2, 2, &[2.0, -2.0, -2.0, 2.0]);
        let p = QpProblem::new(
            q,
            vector(&[0.1, 0.1]),
            dense(1, 2, &[1.0, -1.0]),
            vector(&[1.0]),
            -DMatrix::identity(2, 2),
            vector(&[0.0, 0.0]),
        )
        .unwrap();
        let s = solve_qp_with(&p, &QpSettings::default(), Some(&vector(&[3.0, 2.0]))).unwrap();
        assert!(s.is_optimal(), "{s:?}");
        assert!((s.x[0] - 1.0).abs() < 1e-12 && s.x[1].abs() < 1e-12);
    }

    #[test]
    fn unbounded_linear_objective() {
        let (e, ev) = empty_rows(1);
        let p = QpProblem::new(
            DMatrix::zeros(1, 1),
            vector(&[1.0]),
            e,
            ev,
            dense(1, 1, &[1.0]),
            vector(&[0.0]),
        )
        .unwrap();
        assert_eq!(solve_qp(&p, 1e-8, 100).unwrap_err(), QpError::Unbounded);
    }

    #[test]
    fn rejects_indefinite_and_bad_shapes() {
        let (g, h) = empty_rows(2);
        let err = QpProblem::new(
            dense(2, 2, &[1.0, 0.0, 0.0, -1.0]),
            vector(&[0.0, 0.0]),
            DMatrix::zeros(0, 2),
            DVector::zeros(0),
            g,
            h,
        )
        .unwrap_err();
        assert!(matches!(err, QpError::NotConvex { .. }));
        let (g, h) = empty_rows(2);
        assert!(matches!(
            QpProblem::new(DMatrix::identity(3, 3), vector(&[0.0, 0.0]), DMatrix::zeros(0, 2), DVector::zeros(0), g, h),
            Err(QpError::Dimension(_))
        ));
    }

    #[test]
    fn settings_are_validated() {
        let (g, h) = empty_rows(1);
        let p = QpProblem::new(DMatrix::identity(1, 1), vector(&[0.0]), DMatrix::zeros(0, 1), DVector::zeros(0), g, h)
            .unwrap();
        assert!(matches!(solve_qp(&p, 0.0, 10), Err(QpError::Settings(_))));
    }
}
