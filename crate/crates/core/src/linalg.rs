//! Small dense linear algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Kronecker product `a (x) b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// `n x n` matrix of ones.
pub fn ones(n: usize) -> DMatrix<f64> {
    DMatrix::from_element(n, n, 1.0)
}

/// `tr(A B)` without forming the product.
pub fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(&b.transpose()).sum()
}

/// Inverse of a symmetric positive definite matrix, `None` if the Cholesky
/// factorization fails.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let inv = m.clone().cholesky()?.inverse();
    Some(symmetrize(&inv))
}

/// `(M + M^T) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Largest eigenvalue of a symmetric matrix.
pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m)).eigenvalues.max()
}

/// Largest eigenvalue of `A^-1 B` for symmetric positive definite `A` and
/// symmetric `B`, computed as that of `L^-1 B L^-T`.
pub fn max_generalized_eigenvalue(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<f64> {
    let l = a.clone().cholesky()?.l();
    let lb = l.solve_lower_triangular(b)?;
    let c = l.solve_lower_triangular(&lb.transpose())?;
    Some(max_eigenvalue(&c))
}

/// Unit eigenvector of the smallest eigenvalue of a symmetric matrix.
///
/// When the smallest eigenvalue is repeated (relative gap below `1e-10`), the
/// vector is the normalized projection onto that eigenspace of the first
/// standard basis vector with a nonzero projection, so ties resolve
/// deterministically. The first nonzero component is made positive.
pub fn smallest_eigenvector(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows();
    let eig = SymmetricEigen::new(symmetrize(m));
    let lmin = eig.eigenvalues.min();
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let basis: alloc::vec::Vec<usize> = (0..n)
        .filter(|&c| (eig.eigenvalues[c] - lmin).abs() <= 1e-10 * scale)
        .collect();
    let mut v = if basis.len() == 1 {
        eig.eigenvectors.column(basis[0]).into_owned()
    } else {
        let mut found = DVector::zeros(n);
        for e in 0..n {
            let mut proj = DVector::zeros(n);
            for &c in &basis {
                let col = eig.eigenvectors.column(c);
                proj += col * col[e];
            }
            if proj.norm() > 1e-8 {
                found = proj;
                break;
            }
        }
        found
    };
    let norm = v.norm();
    if norm > 0.0 {
        v /= norm;
    }
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-12).copied() {
        if first < 0.0 {
            v = -v;
        }
    }
    v
}

/// Two-sided standard normal tail probability `P(|Z| >= |z|)`.
pub fn two_sided_normal_p(z: f64) -> f64 {
    libm::erfc(libm::fabs(z) / core::f64::consts::SQRT_2)
}
