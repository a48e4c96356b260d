//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Moore-Penrose pseudo-inverse. The flag is set when singular values were
/// truncated (the matrix is numerically rank deficient).
pub fn pinv(m: &DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * (m.nrows().max(m.ncols()) as f64) * f64::EPSILON;
    let truncated = svd.singular_values.iter().any(|&s| s <= tol);
    let inv = svd
        .pseudo_inverse(tol.max(f64::MIN_POSITIVE))
        .expect("svd computed with u and v");
    (inv, truncated)
}

/// Solves the symmetric system `a x = b`, falling back to the pseudo-inverse
/// when Cholesky fails. The flag reports the fallback.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, bool) {
    if let Some(ch) = a.clone().cholesky() {
        let x = ch.solve(b);
        if x.iter().all(|v| v.is_finite()) {
            return (x, false);
        }
    }
    let (inv, _) = pinv(a);
    (inv * b, true)
}

/// Projects `g` onto the null space of `a` (rows are constraints). Returns
/// `None` when the null space is trivial.
///
/// Builds an orthonormal basis of the row space by modified Gram-Schmidt with
/// one reorthogonalization pass; rows whose remainder falls below `1e-10` of
/// their norm are treated as dependent.
pub fn project_null_space(a: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    let m = a.ncols();
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(a.nrows().min(m));
    for r in 0..a.nrows() {
        let mut v = a.row(r).transpose();
        let norm0 = v.norm();
        if norm0 == 0.0 {
            continue;
        }
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&v);
                v.axpy(-c, b, 1.0);
            }
        }
        let norm = v.norm();
        if norm > 1e-10 * norm0 {
            basis.push(v / norm);
            if basis.len() == m {
                return None;
            }
        }
    }
    let mut u = g.clone();
    for _ in 0..2 {
        for b in &basis {
            let c = b.dot(&u);
            u.axpy(-c, b, 1.0);
        }
    }
    Some(u)
}

/// Ratio of extreme eigenvalues of a symmetric positive semidefinite matrix.
pub fn condition_number_sym(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return 1.0;
    }
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}
