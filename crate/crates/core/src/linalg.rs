//! Small dense helpers shared by the other modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::{Error, Result};

/// Relative cut below which an eigenvalue of a PSD matrix is treated as zero.
pub const NULL_SPACE_CUT: f64 = 1e-10;

/// Eigen-decomposition of a symmetric matrix, eigenvalues sorted descending.
///
/// Columns of the returned matrix are the matching unit eigenvectors.
pub fn sym_eigen(a: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if !a.is_square() {
        return Err(Error::Dimension {
            expected: "square matrix".into(),
            got: format!("{}x{}", a.nrows(), a.ncols()),
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite entry in eigen input".into()));
    }
    let n = a.nrows();
    if n == 0 {
        return Ok((DVector::zeros(0), DMatrix::zeros(0, 0)));
    }
    // Symmetrize first so tiny asymmetries from round-off never leak in.
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical("symmetric eigen-decomposition failed".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok((values, vectors))
}

/// Sorted (descending) eigenvalues of a symmetric matrix.
pub fn sym_eigenvalues(a: &DMatrix<f64>) -> Result<DVector<f64>> {
    sym_eigen(a).map(|(v, _)| v)
}

/// Moore–Penrose pseudo-inverse of a symmetric PSD matrix.
///
/// Eigenvalues below `NULL_SPACE_CUT * λ_max` are treated as the null space.
/// Returns the pseudo-inverse together with the retained rank.
pub fn psd_pseudo_inverse(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, usize)> {
    let n = a.nrows();
    let (values, vectors) = sym_eigen(a)?;
    let lmax = values.iter().cloned().fold(0.0_f64, f64::max);
    let mut pinv = DMatrix::zeros(n, n);
    let mut rank = 0;
    if lmax <= 0.0 {
        return Ok((pinv, 0));
    }
    for k in 0..n {
        let lam = values[k];
        if lam > NULL_SPACE_CUT * lmax {
            rank += 1;
            let u = vectors.column(k);
            pinv += (u * u.transpose()) / lam;
        }
    }
    Ok((pinv, rank))
}

/// `D · A · D` for a diagonal `D` given by its entries.
pub fn diag_sandwich(d: &[f64], a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    DMatrix::from_fn(n, a.ncols(), |i, j| d[i] * a[(i, j)] * d[j])
}

/// Integer power by repeated squaring.
pub fn matrix_power(a: &DMatrix<f64>, t: u32) -> DMatrix<f64> {
    let n = a.nrows();
    let mut result = DMatrix::identity(n, n);
    let mut base = a.clone();
    let mut e = t;
    while e > 0 {
        if e & 1 == 1 {
            result = &result * &base;
        }
        e >>= 1;
        if e > 0 {
            base = &base * &base;
        }
    }
    result
}
