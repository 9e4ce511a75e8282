//! Small dense helpers over nalgebra used by the fitting and prediction code.

use nalgebra::{Cholesky, DMatrix, Dyn};

/// Cholesky factor of a symmetric matrix. When the plain factorization fails
/// and `ridge > 0`, retries once with `ridge` added to the diagonal.
pub(crate) fn spd_factor(mat: DMatrix<f64>, ridge: f64) -> Option<Cholesky<f64, Dyn>> {
    let n = mat.nrows();
    match Cholesky::new(mat.clone()) {
        Some(c) => Some(c),
        None if ridge > 0.0 => Cholesky::new(mat + DMatrix::identity(n, n) * ridge),
        None => None,
    }
}

pub(crate) fn log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

pub(crate) fn symmetrize(mat: &mut DMatrix<f64>) {
    let n = mat.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (mat[(i, j)] + mat[(j, i)]);
            mat[(i, j)] = v;
            mat[(j, i)] = v;
        }
    }
}
