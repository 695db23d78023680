//! Small dense linear-algebra helpers shared by the estimator modules.
//!
//! Matrices follow the panel convention: a `J x T` matrix has products in
//! rows and markets in columns, and `vec` stacks columns (nalgebra's
//! native column-major storage), so element `(j, t)` lands at `j + J t`.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

/// Relative eigenvalue cutoff used by every pseudo-inverse in the crate.
pub const PINV_RTOL: f64 = 1e-10;

/// Symmetric eigendecomposition with eigenvalues sorted in descending order
/// and eigenvectors permuted to match.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    if n == 0 {
        return (DVector::zeros(0), DMatrix::zeros(0, 0));
    }
    let eig = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Eigenvalues only, descending.
pub fn sym_eigenvalues_desc(m: &DMatrix<f64>) -> DVector<f64> {
    if m.nrows() == 0 {
        return DVector::zeros(0);
    }
    let mut v: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    v.sort_by(|a, b| b.total_cmp(a));
    DVector::from_vec(v)
}

/// Moore-Penrose inverse of a symmetric PSD matrix; eigenvalues below
/// `PINV_RTOL` times the largest are treated as zero.
pub fn pinv_sym(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let (vals, vecs) = sym_eigen_desc(&symmetrize(a));
    let top = vals.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let cut = PINV_RTOL * top;
    let mut out = DMatrix::zeros(n, n);
    if top == 0.0 {
        return out;
    }
    for (i, &v) in vals.iter().enumerate() {
        if v.abs() > cut {
            let c = vecs.column(i);
            out += (c * c.transpose()) / v;
        }
    }
    out
}

/// `P_A = A (A'A)^+ A'`. A matrix with no columns (or all-zero) projects to 0.
pub fn projector(a: &DMatrix<f64>) -> DMatrix<f64> {
    if a.ncols() == 0 {
        return DMatrix::zeros(a.nrows(), a.nrows());
    }
    let gram = a.transpose() * a;
    a * pinv_sym(&gram) * a.transpose()
}

/// `M_A = I - P_A`.
pub fn annihilator(a: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::identity(a.nrows(), a.nrows()) - projector(a)
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Column-major vectorization.
pub fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Inverse of `vec_of`.
pub fn unvec(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, v.as_slice())
}

/// Stack a list of equally-sized matrices as columns `vec(A_i)`.
pub fn stack_vec(mats: &[DMatrix<f64>], rows: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows, mats.len());
    for (i, m) in mats.iter().enumerate() {
        out.set_column(i, &DVector::from_column_slice(m.as_slice()));
    }
    out
}

/// Column-wise concatenation `(a, b)`.
pub fn hcat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    debug_assert_eq!(a.nrows(), b.nrows());
    let mut out = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

/// Inverse of a symmetric matrix via Cholesky, falling back to the
/// thresholded pseudo-inverse when the matrix is not numerically PD.
pub fn inv_sym(a: &DMatrix<f64>) -> DMatrix<f64> {
    let s = symmetrize(a);
    match s.clone().cholesky() {
        Some(ch) => ch.inverse(),
        None => pinv_sym(&s),
    }
}

/// Ratio of largest to smallest absolute eigenvalue of a symmetric matrix.
pub fn condition_number_sym(a: &DMatrix<f64>) -> f64 {
    let vals = sym_eigenvalues_desc(&symmetrize(a));
    if vals.is_empty() {
        return 1.0;
    }
    let max = vals.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let min = vals.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn frobenius_sq(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}
