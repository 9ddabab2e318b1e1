//! Small dense helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative pivot threshold below which a factorization counts as singular.
const PIVOT_TOL: f64 = 1e-12;

/// Full-pivot LU of a square matrix, or `None` when numerically singular.
pub(crate) fn factor(matrix: &Matrix) -> Option<nalgebra::linalg::FullPivLU<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    if matrix.nrows() != matrix.ncols() {
        return None;
    }
    if matrix.nrows() == 0 {
        return Some(matrix.clone().full_piv_lu());
    }
    let lu = matrix.clone().full_piv_lu();
    let diag = lu.u().diagonal();
    let max = diag.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    let min = diag.iter().fold(f64::INFINITY, |m, d| m.min(d.abs()));
    let scale = matrix.amax().max(1.0);
    if max == 0.0 || min <= PIVOT_TOL * scale {
        None
    } else {
        Some(lu)
    }
}

/// The saddle-point matrix `[[h, gᵀ], [g, 0]]`.
pub(crate) fn kkt_matrix(h: &Matrix, g: &Matrix) -> Matrix {
    let v = h.nrows();
    let c = g.nrows();
    let mut k = Matrix::zeros(v + c, v + c);
    k.view_mut((0, 0), (v, v)).copy_from(h);
    if c > 0 {
        k.view_mut((0, v), (v, c)).copy_from(&g.transpose());
        k.view_mut((v, 0), (c, v)).copy_from(g);
    }
    k
}

pub(crate) fn inf_norm(v: &Vector) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

pub(crate) fn is_symmetric(m: &Matrix, tol: f64) -> bool {
    m.is_square()
        && (0..m.nrows()).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol * (1.0 + m[(i, j)].abs())))
}

/// Numerical rank via singular values.
pub(crate) fn rank(m: &Matrix) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let svd = m.clone().svd(false, false);
    let max = svd.singular_values.max();
    let tol = max * (m.nrows().max(m.ncols()) as f64) * f64::EPSILON * 16.0;
    svd.singular_values.iter().filter(|&&s| s > tol).count()
}
