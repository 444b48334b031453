//! Small dense linear-algebra helpers shared by the estimators and solvers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Replaces `m` by `(m + m') / 2`, making it exactly symmetric.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted in
/// descending order (eigenvectors are the matching columns).
pub fn sorted_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = eig.eigenvectors.select_columns(&order);
    (values, vectors)
}

/// `V diag(values) V'`, symmetrized.
pub fn reassemble(values: &DVector<f64>, vectors: &DMatrix<f64>) -> DMatrix<f64> {
    let mut scaled = vectors.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= values[j];
    }
    let mut out = scaled * vectors.transpose();
    symmetrize(&mut out);
    out
}

/// Clips negative eigenvalues to zero. Matrices that are already PSD are
/// returned symmetrized but otherwise untouched. Also returns the smallest
/// eigenvalue seen before clipping.
pub fn clip_psd(mut m: DMatrix<f64>) -> (DMatrix<f64>, f64) {
    symmetrize(&mut m);
    if m.nrows() == 0 {
        return (m, 0.0);
    }
    let (values, vectors) = sorted_eigen(&m);
    let min = values[values.len() - 1];
    if min >= 0.0 {
        return (m, min);
    }
    let clipped = values.map(|v| v.max(0.0));
    (reassemble(&clipped, &vectors), min)
}

/// Plain Cholesky factor `L` with `A = L L'`. Fails when a pivot drops to or
/// below `rel_tol` times the largest diagonal entry.
pub fn cholesky(a: &DMatrix<f64>, rel_tol: f64) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
    if n > 0 && scale == 0.0 {
        return None;
    }
    let floor = rel_tol * scale;
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > floor) {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Some(l)
}

/// Solves `L L' x = b` given the Cholesky factor.
pub fn cholesky_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut y = b.clone();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    y
}

/// Cheap semi-definiteness test by diagonally pivoted Cholesky: succeeds when
/// the Schur complement left after exhausting the positive pivots is
/// negligible relative to `rel_tol` times the largest diagonal.
pub fn is_psd_pivoted(a: &DMatrix<f64>, rel_tol: f64) -> bool {
    let n = a.nrows();
    let scale = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return true;
    }
    let tol = rel_tol * scale;
    let mut s = a.clone();
    let mut remaining: Vec<usize> = (0..n).collect();
    while !remaining.is_empty() {
        let (pos, &p) = remaining
            .iter()
            .enumerate()
            .max_by(|x, y| s[(*x.1, *x.1)].total_cmp(&s[(*y.1, *y.1)]))
            .expect("non-empty");
        let d = s[(p, p)];
        if d <= tol {
            return remaining
                .iter()
                .all(|&i| remaining.iter().all(|&j| s[(i, j)].abs() <= tol));
        }
        remaining.swap_remove(pos);
        for &i in &remaining {
            let f = s[(i, p)] / d;
            if f == 0.0 {
                continue;
            }
            for &j in &remaining {
                s[(i, j)] -= f * s[(p, j)];
            }
        }
    }
    true
}
