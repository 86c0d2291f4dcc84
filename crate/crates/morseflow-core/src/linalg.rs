//! Small dense linear algebra helpers shared across the crate.
//!
//! Everything here works on `nalgebra` dynamic matrices. Dimensions are tiny
//! (2 to 4 in the built-in manifolds), so clarity wins over cleverness.

use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

#[allow(unused_imports)]
use crate::real::FloatExt;
use crate::{Error, Result};

/// Generalized symmetric eigenproblem `H v = lambda G v` with `G` positive
/// definite. Returns eigenvalues in ascending order and eigenvectors as
/// matrix columns, G-orthonormal (`V^T G V = I`).
///
/// Column signs are fixed deterministically: the entry of largest absolute
/// value in each eigenvector is made positive (ties broken by lowest row).
pub fn sym_eig_pencil(h: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = h.nrows();
    if h.ncols() != n || g.nrows() != n || g.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: g.nrows(),
        });
    }
    let chol = g
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("sym_eig_pencil"))?;
    let l = chol.l();
    // M = L^-1 H L^-T is symmetric with the same eigenvalues as the pencil.
    let a = l
        .solve_lower_triangular(h)
        .ok_or(Error::SingularMatrix("sym_eig_pencil"))?;
    let m = l
        .solve_lower_triangular(&a.transpose())
        .ok_or(Error::SingularMatrix("sym_eig_pencil"))?
        .transpose();
    // Symmetrize to kill round-off skew before the eigensolver.
    let m = (&m + m.transpose()) * 0.5;
    let eig = m.symmetric_eigen();
    // Back-substitute: v = L^-T w is G-orthonormal when w is orthonormal.
    let vecs = l
        .transpose()
        .solve_upper_triangular(&eig.eigenvectors)
        .ok_or(Error::SingularMatrix("sym_eig_pencil"))?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));

    let mut values = Vec::with_capacity(n);
    let mut columns = Vec::with_capacity(n);
    for &i in &order {
        values.push(eig.eigenvalues[i]);
        let mut col = vecs.column(i).clone_owned();
        fix_sign(&mut col);
        columns.push(col);
    }
    Ok((values, DMatrix::from_columns(&columns)))
}

/// Flips `v` so its largest-magnitude entry is positive. Ties go to the
/// lowest row so the convention is reproducible across runs.
pub fn fix_sign(v: &mut DVector<f64>) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        *v = -&*v;
    }
}

/// Orientation-preserving Gram-Schmidt on the columns of `f`. The returned
/// matrix has orthonormal columns spanning the same subspace, and the change
/// of basis has positive determinant (the triangular factor has a positive
/// diagonal). Fails if the columns are linearly dependent.
pub fn gram_schmidt_oriented(f: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut q = f.clone();
    for j in 0..q.ncols() {
        for i in 0..j {
            let qi = q.column(i).clone_owned();
            let proj = q.column(j).dot(&qi);
            let mut col = q.column_mut(j);
            col.axpy(-proj, &qi, 1.0);
        }
        let norm = q.column(j).norm();
        if norm < 1e-12 {
            return Err(Error::SingularMatrix("gram_schmidt_oriented"));
        }
        q.column_mut(j).scale_mut(1.0 / norm);
    }
    Ok(q)
}

/// Completes the unit vector `w` to an oriented basis of R^n.
///
/// Returns `(e, sigma)` where `e` is n x (n-1) and `sigma = det [w | e]`,
/// which is `+1` or `-1` exactly. The columns come from the Householder
/// reflection sending `e_1` to `w`; when `w` is already within `1e-8` of
/// `e_1` the reflection degenerates and the identity complement is used.
pub fn householder_complement(w: &DVector<f64>) -> (DMatrix<f64>, f64) {
    let n = w.len();
    debug_assert!((w.norm() - 1.0).abs() < 1e-9, "householder wants a unit vector");
    let mut v = w.clone();
    v[0] -= 1.0;
    let vn2 = v.norm_squared();
    let mut e = DMatrix::zeros(n, n - 1);
    if vn2.sqrt() < 1e-8 {
        // w is essentially e_1: complement by the remaining standard basis.
        for j in 1..n {
            e[(j, j - 1)] = 1.0;
        }
        return (e, 1.0);
    }
    // H = I - 2 v v^T / |v|^2 maps e_1 to w; columns H e_j for j >= 1
    // complete w to a basis with det [w | e] = det H = -1.
    for j in 1..n {
        let scale = -2.0 * v[j] / vn2;
        for i in 0..n {
            e[(i, j - 1)] = scale * v[i];
        }
        e[(j, j - 1)] += 1.0;
    }
    (e, -1.0)
}

/// Determinant of a small square matrix.
pub fn det(m: &DMatrix<f64>) -> f64 {
    m.clone().lu().determinant()
}

/// Smallest singular value of (a copy of) `m`.
pub fn min_singular_value(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    sv.iter().fold(f64::INFINITY, |acc, &s| acc.min(s))
}

/// Solves `G x = b` for symmetric positive definite `G`.
pub fn solve_spd(g: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    g.clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("solve_spd"))
        .map(|c| c.solve(b))
}

/// Solves `A x = b` by LU with partial pivoting.
pub fn solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    a.clone()
        .lu()
        .solve(b)
        .ok_or(Error::SingularMatrix("solve"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn pencil_reduces_to_standard_problem_for_identity_metric() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let g = DMatrix::identity(2, 2);
        let (vals, vecs) = sym_eig_pencil(&h, &g).unwrap();
        assert_relative_eq!(vals[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(vals[1], 3.0, epsilon = 1e-12);
        // V^T V = I for the identity metric.
        let gram = vecs.transpose() * &vecs;
        assert_relative_eq!(gram, DMatrix::identity(2, 2), epsilon = 1e-12);
    }

    #[test]
    fn pencil_eigenvectors_are_metric_orthonormal() {
        let h = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.0, 0.5, -2.0, 0.3, 0.0, 0.3, 0.7]);
        let g = DMatrix::from_row_slice(3, 3, &[2.0, 0.1, 0.0, 0.1, 1.5, 0.2, 0.0, 0.2, 3.0]);
        let (vals, vecs) = sym_eig_pencil(&h, &g).unwrap();
        let gram = vecs.transpose() * &g * &vecs;
        assert_relative_eq!(gram, DMatrix::identity(3, 3), epsilon = 1e-10);
        // Residual H v = lambda G v for every pair.
        for i in 0..3 {
            let v = vecs.column(i);
            let res = &h * v - &g * v * vals[i];
            assert!(res.norm() < 1e-10, "residual {} for eigenpair {i}", res.norm());
        }
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn sign_convention_is_deterministic() {
        let mut v = DVector::from_vec(alloc::vec![0.3, -0.9, 0.1]);
        fix_sign(&mut v);
        assert!(v[1] > 0.0);
        let mut w = DVector::from_vec(alloc::vec![-0.5, 0.5, 0.1]);
        fix_sign(&mut w);
        // Tie on magnitude: lowest row wins, so entry 0 is made positive.
        assert!(w[0] > 0.0 && w[1] < 0.0);
    }

    #[test]
    fn gram_schmidt_preserves_orientation() {
        let f = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
        let q = gram_schmidt_oriented(&f).unwrap();
        let gram = q.transpose() * &q;
        assert_relative_eq!(gram, DMatrix::identity(3, 3), epsilon = 1e-12);
        assert_eq!(det(&q).signum(), det(&f).signum());
    }

    #[test]
    fn householder_complement_orientation() {
        let w = DVector::from_vec(alloc::vec![0.6, 0.8, 0.0]);
        let (e, sigma) = householder_complement(&w);
        let mut cols = alloc::vec![w.clone()];
        cols.extend((0..e.ncols()).map(|j| e.column(j).clone_owned()));
        let basis = DMatrix::from_columns(&cols);
        assert_relative_eq!(det(&basis), sigma, epsilon = 1e-12);
        // Columns are orthonormal and orthogonal to w.
        for j in 0..e.ncols() {
            assert!(w.dot(&e.column(j).clone_owned()).abs() < 1e-12);
            assert_relative_eq!(e.column(j).norm(), 1.0, epsilon = 1e-12);
        }
        let near_e1 = DVector::from_vec(alloc::vec![1.0, 1e-12, 0.0]);
        let (_, sigma) = householder_complement(&(near_e1.normalize()));
        assert_eq!(sigma, 1.0);
    }

    #[test]
    fn spd_solve_round_trips() {
        let g = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let b = DVector::from_vec(alloc::vec![1.0, 2.0]);
        let x = solve_spd(&g, &b).unwrap();
        assert_relative_eq!(&g * &x, b, epsilon = 1e-12);
    }
}
