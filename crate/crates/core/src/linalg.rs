//! Small dense linear-algebra helpers shared by the graph and analysis modules.
//!
//! Everything here is desk scale (matrices up to a few hundred rows), backed
//! by nalgebra's pure-Rust factorizations. The engine itself never calls into
//! this module; per-agent math stays on vectors.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};

fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_na(a: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.nrows(), a.ncols()), |(i, j)| a[(i, j)])
}

/// Eigenvalues of a symmetric matrix, ascending.
pub fn sym_eigenvalues(a: &Array2<f64>) -> Array1<f64> {
    assert_eq!(a.nrows(), a.ncols(), "matrix must be square");
    let mut vals: Vec<f64> = to_na(a).symmetric_eigen().eigenvalues.iter().copied().collect();
    vals.sort_by(|x, y| x.partial_cmp(y).expect("non-finite eigenvalue"));
    Array1::from_vec(vals)
}

/// Spectral norm of a symmetric matrix (largest eigenvalue magnitude).
pub fn sym_spectral_norm(a: &Array2<f64>) -> f64 {
    sym_eigenvalues(a).iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Solve `a x = b` for symmetric positive definite `a` via Cholesky.
pub fn solve_spd(a: &Array2<f64>, b: &Array1<f64>) -> Option<Array1<f64>> {
    let chol = to_na(a).cholesky()?;
    let x = chol.solve(&DVector::from_iterator(b.len(), b.iter().copied()));
    Some(Array1::from_iter(x.iter().copied()))
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn invert_spd(a: &Array2<f64>) -> Option<Array2<f64>> {
    let inv = to_na(a).cholesky()?.inverse();
    Some(from_na(&inv))
}

/// Moore-Penrose pseudoinverse of a symmetric PSD matrix.
///
/// Eigenvalues at or below `zero_tol` are treated as exact zeros.
pub fn sym_pseudoinverse(a: &Array2<f64>, zero_tol: f64) -> Array2<f64> {
    assert_eq!(a.nrows(), a.ncols(), "matrix must be square");
    let eig = to_na(a).symmetric_eigen();
    let n = a.nrows();
    let mut out = DMatrix::zeros(n, n);
    for k in 0..n {
        let lam = eig.eigenvalues[k];
        if lam.abs() > zero_tol {
            let v = eig.eigenvectors.column(k);
            // out += (1/lam) v v^T
            for i in 0..n {
                for j in 0..n {
                    out[(i, j)] += v[i] * v[j] / lam;
                }
            }
        }
    }
    from_na(&out)
}
