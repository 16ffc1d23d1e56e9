//! Small dense symmetric-matrix helpers: eigen-decomposition with a fixed
//! ordering, PSD square roots and projection onto `{0 ⪯ U ⪯ I}`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// `(A + Aᵀ) / 2`.
pub fn symmetrize<T: Real>(a: &DMatrix<T>) -> DMatrix<T> {
    (a + a.transpose()) * T::lit(0.5)
}

/// Eigen-decomposition with eigenvalues sorted in descending order and each
/// eigenvector's first non-negligible coordinate made positive.
pub fn sorted_eigen<T: Real>(a: &DMatrix<T>) -> (DVector<T>, DMatrix<T>) {
    let n = a.nrows();
    let eig = SymmetricEigen::new(symmetrize(a));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(i).into_owned();
        orient(&mut v);
        vectors.set_column(col, &v);
    }
    (values, vectors)
}

/// Flip `v` so its first coordinate with magnitude above 1e-8·‖v‖∞ is positive.
pub fn orient<T: Real>(v: &mut DVector<T>) {
    let scale = v.amax();
    let thresh = scale * T::lit(1e-8);
    if let Some(first) = v.iter().copied().find(|x| x.abs() > thresh) {
        if first < T::zero() {
            v.neg_mut();
        }
    }
}

pub fn min_eigenvalue<T: Real>(a: &DMatrix<T>) -> T {
    if a.nrows() == 0 {
        return T::zero();
    }
    let eig = SymmetricEigen::new(symmetrize(a));
    eig.eigenvalues.iter().copied().fold(T::max_value().unwrap(), |m, x| if x < m { x } else { m })
}

pub fn max_eigenvalue<T: Real>(a: &DMatrix<T>) -> T {
    if a.nrows() == 0 {
        return T::zero();
    }
    let eig = SymmetricEigen::new(symmetrize(a));
    eig.eigenvalues.iter().copied().fold(T::min_value().unwrap(), |m, x| if x > m { x } else { m })
}

/// Reassemble `V f(Λ) Vᵀ` from a symmetric matrix.
pub fn spectral_map<T: Real>(a: &DMatrix<T>, f: impl Fn(T) -> T) -> DMatrix<T> {
    let eig = SymmetricEigen::new(symmetrize(a));
    let v = &eig.eigenvectors;
    let mapped = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&x| f(x)));
    symmetrize(&(v * DMatrix::from_diagonal(&mapped) * v.transpose()))
}

/// Symmetrize and clip negative eigenvalues to zero. Eigenvalues below `-tol`
/// are reported as a numerical error rather than silently clipped.
pub fn clip_psd<T: Real>(a: &DMatrix<T>, tol: T) -> Result<DMatrix<T>> {
    let lo = min_eigenvalue(a);
    if lo < -tol {
        return Err(Error::Numerical(format!(
            "matrix has eigenvalue {lo} below -{tol}"
        )));
    }
    Ok(spectral_map(a, |x| if x < T::zero() { T::zero() } else { x }))
}

/// Unique PSD square root, after clipping tiny negative eigenvalues.
pub fn psd_sqrt<T: Real>(a: &DMatrix<T>, tol: T) -> Result<DMatrix<T>> {
    let lo = min_eigenvalue(a);
    if lo < -tol {
        return Err(Error::Numerical(format!(
            "square root of matrix with eigenvalue {lo}"
        )));
    }
    Ok(spectral_map(a, |x| if x <= T::zero() { T::zero() } else { x.sqrt() }))
}

/// Euclidean projection onto `{U : 0 ⪯ U ⪯ I}` by clipping eigenvalues to `[0, 1]`.
pub fn project_unit_interval<T: Real>(a: &DMatrix<T>) -> DMatrix<T> {
    spectral_map(a, |x| {
        if x < T::zero() {
            T::zero()
        } else if x > T::one() {
            T::one()
        } else {
            x
        }
    })
}

pub fn frobenius<T: Real>(a: &DMatrix<T>) -> T {
    a.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt()
}

/// Symmetric matrix from row-major data.
pub fn from_row_major<T: Real>(dim: usize, data: &[f64]) -> Result<DMatrix<T>> {
    if data.len() != dim * dim {
        return Err(Error::Shape(format!(
            "expected {} entries for a {dim}x{dim} matrix, got {}",
            dim * dim,
            data.len()
        )));
    }
    Ok(DMatrix::from_row_iterator(dim, dim, data.iter().map(|&x| T::lit(x))))
}

pub fn to_row_major<T: Real>(a: &DMatrix<T>) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len());
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            out.push(a[(i, j)].as_f64());
        }
    }
    out
}

pub fn cast<T: Real>(a: &DMatrix<f64>) -> DMatrix<T> {
    a.map(T::lit)
}

pub fn to_f64<T: Real>(a: &DMatrix<T>) -> DMatrix<f64> {
    a.map(|x| x.as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sqrt_squares_back() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let r = psd_sqrt(&a, 1e-10).unwrap();
        assert_relative_eq!(&r * &r, a, epsilon = 1e-12);
    }

    #[test]
    fn projection_clips_both_ends() {
        let a = DMatrix::from_row_slice(2, 2, &[1.5, 0.0, 0.0, -0.3]);
        let p = project_unit_interval(&a);
        assert_relative_eq!(p, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]), epsilon = 1e-14);
    }

    #[test]
    fn clip_rejects_clearly_negative() {
        let a = DMatrix::from_row_slice(1, 1, &[-0.1]);
        assert!(clip_psd(&a, 1e-6).is_err());
        let b = DMatrix::from_row_slice(1, 1, &[-1e-12]);
        assert_eq!(clip_psd(&b, 1e-6).unwrap()[(0, 0)], 0.0);
    }

    #[test]
    fn eigen_sorted_descending() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 3.0, 0.1, 0.0, 0.1, 2.0]);
        let (vals, vecs) = sorted_eigen(&a);
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
        let recon = &vecs * DMatrix::from_diagonal(&vals) * vecs.transpose();
        assert_relative_eq!(recon, a, epsilon = 1e-12);
    }
}
