//! Small dense helpers built on symmetric eigendecompositions.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, Matrix3, SymmetricEigen};

/// Solution of the symmetric positive semidefinite system `N x = b`.
pub(crate) struct SymSolve {
    pub x: DVector<f64>,
    pub condition: f64,
    pub truncated: bool,
}

/// Solves `N x = b` by eigen-decomposition. When the condition number exceeds
/// `cond_limit`, eigen-directions below `λ_max / cond_limit` are dropped,
/// giving the minimum-norm solution on the retained subspace.
pub(crate) fn solve_symmetric(n: &DMatrix<f64>, b: &DVector<f64>, cond_limit: f64) -> SymSolve {
    let k = b.len();
    if k == 0 {
        return SymSolve {
            x: DVector::zeros(0),
            condition: 1.0,
            truncated: false,
        };
    }
    let eig = SymmetricEigen::new(n.clone());
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    let truncated = !(condition <= cond_limit);
    let floor = if truncated { max / cond_limit } else { 0.0 };
    let mut x = DVector::zeros(k);
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > floor && lam > 0.0 {
            let v = eig.eigenvectors.column(i);
            x += v * (v.dot(b) / lam);
        }
    }
    SymSolve { x, condition, truncated }
}

/// Pseudo-inverse of a symmetric PSD 3x3 matrix and its condition number.
pub(crate) fn pinv_sym3(m: &Matrix3<f64>) -> (Matrix3<f64>, f64) {
    let eig = m.symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    let mut inv = Matrix3::zeros();
    for i in 0..3 {
        let lam = eig.eigenvalues[i];
        if lam > 1e-14 * max && lam > 0.0 {
            let v = eig.eigenvectors.column(i);
            inv += v * v.transpose() / lam;
        }
    }
    (inv, condition)
}

/// Eigenvalues `(max, min)` of a symmetric 2x2 matrix.
pub(crate) fn eig2_extremes(m: &Matrix2<f64>) -> (f64, f64) {
    let eig = m.symmetric_eigen();
    (eig.eigenvalues.max(), eig.eigenvalues.min())
}

/// Singular-value decomposition of a 2x3 matrix expressed through its left
/// factor: returns `(U, [σ1, σ2])` with `σ1 ≥ σ2 ≥ 0` and `Y Yᵀ = U diag(σ²) Uᵀ`.
pub(crate) fn left_svd_2x3(y: &Matrix2x3<f64>) -> (Matrix2<f64>, [f64; 2]) {
    let eig = (y * y.transpose()).symmetric_eigen();
    let (i1, i2) = if eig.eigenvalues[0] >= eig.eigenvalues[1] { (0, 1) } else { (1, 0) };
    let u = Matrix2::from_columns(&[eig.eigenvectors.column(i1), eig.eigenvectors.column(i2)]);
    (u, [eig.eigenvalues[i1].max(0.0).sqrt(), eig.eigenvalues[i2].max(0.0).sqrt()])
}

/// Maps a 2x3 matrix to new singular values while keeping its singular vectors.
pub(crate) fn with_singular_values(y: &Matrix2x3<f64>, u: &Matrix2<f64>, old: [f64; 2], new: [f64; 2]) -> Matrix2x3<f64> {
    let mut scale = Matrix2::zeros();
    for i in 0..2 {
        let f = if old[i] > 0.0 { new[i] / old[i] } else { 0.0 };
        scale += u.column(i) * u.column(i).transpose() * f;
    }
    scale * y
}

/// Row-orthonormal polar factor `(Y Yᵀ)^{-1/2} Y`, or `None` if `Y` is rank deficient.
pub(crate) fn polar_2x3(y: &Matrix2x3<f64>) -> Option<Matrix2x3<f64>> {
    let (u, sv) = left_svd_2x3(y);
    if !(sv[1] > 1e-12 * sv[0]) {
        return None;
    }
    Some(with_singular_values(y, &u, sv, [1.0, 1.0]))
}
