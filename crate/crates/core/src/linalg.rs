//! Dense linear-algebra helpers: norms, definiteness checks, matrix roots.
//!
//! Everything here operates on `f64` dynamic matrices; problem sizes are
//! small (state dimension of a plant), so eigendecompositions are cheap.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative tolerance for definiteness checks.
pub const DEFINITENESS_TOL: f64 = 1e-10;

/// Eigenvalue floor below which a weighting matrix is rejected as singular.
pub const WEIGHT_EIG_FLOOR: f64 = 1e-12;

/// `(M + M^T)/2`, guarding symmetric computations against round-off drift.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().fold(0.0, |acc, s| acc.max(s))
}

/// Largest eigenvalue magnitude of a square matrix.
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::config(format!(
            "spectral radius requires a square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    if !all_finite(m) {
        return Err(Error::config("spectral radius of a non-finite matrix"));
    }
    Ok(m.complex_eigenvalues()
        .iter()
        .fold(0.0_f64, |acc, ev| acc.max(ev.norm())))
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    let mut ev = symmetrize(m).symmetric_eigenvalues();
    ev.as_mut_slice()
        .sort_by(|a, b| a.partial_cmp(b).expect("non-finite eigenvalue"));
    ev
}

pub fn min_eigenvalue_sym(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m)[0]
}

/// Symmetric positive definite test: smallest eigenvalue above tolerance.
pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    if !m.is_square() || !all_finite(m) {
        return false;
    }
    let ev = sym_eigenvalues(m);
    let scale = ev[ev.len() - 1].abs().max(ev[0].abs()).max(1.0);
    ev[0] > DEFINITENESS_TOL * scale
}

/// Symmetric positive semi-definite test with relative tolerance.
pub fn is_positive_semidefinite(m: &DMatrix<f64>) -> bool {
    if !m.is_square() || !all_finite(m) {
        return false;
    }
    let ev = sym_eigenvalues(m);
    let scale = ev[ev.len() - 1].abs().max(ev[0].abs()).max(1.0);
    ev[0] >= -DEFINITENESS_TOL * scale
}

/// Condition number of a symmetric pd matrix.
pub fn condition_number_pd(m: &DMatrix<f64>) -> Result<f64> {
    let ev = sym_eigenvalues(m);
    if ev[0] <= 0.0 {
        return Err(Error::numerical(
            "condition number requested for a non-pd matrix",
        ));
    }
    Ok(ev[ev.len() - 1] / ev[0])
}

/// Symmetric square root and inverse square root of a pd matrix.
///
/// Eigenvalues below [`WEIGHT_EIG_FLOOR`] are an error: the weighted norms
/// are only defined for pd weightings.
pub fn sqrt_pd(w: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !w.is_square() || !all_finite(w) {
        return Err(Error::config("matrix square root requires a finite square matrix"));
    }
    let eig = symmetrize(w).symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l < WEIGHT_EIG_FLOOR) {
        return Err(Error::numerical(format!(
            "weighting matrix is not positive definite (min eigenvalue {:.3e})",
            eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
        )));
    }
    let v = &eig.eigenvectors;
    let root = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    let inv_root = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    Ok((v * root * v.transpose(), v * inv_root * v.transpose()))
}

/// `W`-induced operator norm of `X`: the largest singular value of
/// `W^{1/2} X W^{-1/2}`, i.e. `sup_z sqrt(z^T X^T W X z / z^T W z)`.
pub fn induced_norm(x: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<f64> {
    if x.nrows() != w.nrows() || x.ncols() != w.ncols() || !x.is_square() {
        return Err(Error::config(format!(
            "induced norm needs square X and W of equal size, got {}x{} and {}x{}",
            x.nrows(),
            x.ncols(),
            w.nrows(),
            w.ncols()
        )));
    }
    let (root, inv_root) = sqrt_pd(w)?;
    Ok(spectral_norm(&(&root * x * &inv_root)))
}

/// Weighted gap norm for symmetric deviations: `|W^{-1/2} X W^{-1/2}|`.
///
/// This is the norm in which the one-step value-iteration contraction is
/// provable; it coincides with [`induced_norm`] in the scalar case.
pub fn congruence_norm(x: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<f64> {
    if x.nrows() != w.nrows() || x.ncols() != w.ncols() || !x.is_square() {
        return Err(Error::config("congruence norm needs square X and W of equal size"));
    }
    let (_, inv_root) = sqrt_pd(w)?;
    Ok(spectral_norm(&(&inv_root * x * &inv_root)))
}

/// Row-major nested arrays for JSON export.
pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// Parse row-major nested arrays, validating rectangularity and finiteness.
pub fn rows_to_matrix(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::config(format!("matrix {name} has no rows")));
    }
    let ncols = rows[0].len();
    if ncols == 0 {
        return Err(Error::config(format!("matrix {name} has empty rows")));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::config(format!("matrix {name} has ragged rows")));
    }
    let m = DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]);
    if !all_finite(&m) {
        return Err(Error::config(format!("matrix {name} has non-finite entries")));
    }
    Ok(m)
}
