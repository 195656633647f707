//! Dense Jacobi solvers: cyclic two-sided Jacobi for symmetric eigenproblems and
//! one-sided (Hestenes) Jacobi for singular values.

use alloc::vec::Vec;

use super::matrix::{dot, Matrix};
use crate::error::{invalid, Error, Result};
use crate::float::sqrt;

/// Hard cap on Jacobi sweeps for both solvers.
pub const MAX_SWEEPS: usize = 10_000;

/// Symmetry tolerance accepted by the eigen solvers.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Eigen-decomposition of a symmetric matrix, eigenvalues ascending.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    /// Column `j` is the unit eigenvector for `values[j]`.
    pub vectors: Matrix,
}

fn check_symmetric(a: &Matrix) -> Result<()> {
    if !a.is_square() {
        return Err(invalid!("eigen solver needs a square matrix, got {:?}", a.shape()));
    }
    let scale = a.frobenius_norm().max(1.0);
    let asym = a.asymmetry();
    if asym > SYMMETRY_TOL * scale {
        return Err(invalid!("matrix is not symmetric (max |A_ij - A_ji| = {asym:e})"));
    }
    Ok(())
}

pub fn symmetric_eigen(a: &Matrix) -> Result<SymmetricEigen> {
    check_symmetric(a)?;
    let n = a.rows();
    let mut m = a.clone();
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (m.get(i, j) + m.get(j, i));
            m.set(i, j, avg);
            m.set(j, i, avg);
        }
    }
    let mut v = Matrix::identity(n);
    let fro = m.frobenius_norm();
    let target = f64::EPSILON * fro;

    let mut converged = n < 2 || fro == 0.0;
    let mut sweeps = 0;
    while !converged {
        if sweeps == MAX_SWEEPS {
            return Err(Error::NumericFailure(alloc::format!(
                "Jacobi eigen solver did not converge in {MAX_SWEEPS} sweeps"
            )));
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + sqrt(1.0 + theta * theta))
                } else {
                    -1.0 / (-theta + sqrt(1.0 + theta * theta))
                };
                let c = 1.0 / sqrt(1.0 + t * t);
                let s = t * c;
                for k in 0..n {
                    let akp = m.get(k, p);
                    let akq = m.get(k, q);
                    m.set(k, p, c * akp - s * akq);
                    m.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = m.get(p, k);
                    let aqk = m.get(q, k);
                    m.set(p, k, c * apk - s * aqk);
                    m.set(q, k, s * apk + c * aqk);
                }
                m.set(p, q, 0.0);
                m.set(q, p, 0.0);
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
        let mut off = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off += m.get(i, j) * m.get(i, j);
                }
            }
        }
        converged = sqrt(off) <= target;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(i, i).total_cmp(&m.get(j, j)));
    let values = order.iter().map(|&i| m.get(i, i)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors.set(r, col, v.get(r, src));
        }
    }
    Ok(SymmetricEigen { values, vectors })
}

/// Minimum eigenvalue of a symmetric matrix.
///
/// The returned eigenpair is checked: `‖Av − λv‖ ≤ 1e-8 · max(1, ‖A‖_F) · ‖v‖`.
pub fn smallest_eigenvalue(a: &Matrix) -> Result<f64> {
    let eig = symmetric_eigen(a)?;
    let n = a.rows();
    if n == 0 {
        return Err(invalid!("empty matrix has no eigenvalues"));
    }
    let lambda = eig.values[0];
    let v: Vec<f64> = (0..n).map(|r| eig.vectors.get(r, 0)).collect();
    let av = a.matvec(&v)?;
    let resid = sqrt(
        av.iter()
            .zip(&v)
            .map(|(x, y)| (x - lambda * y) * (x - lambda * y))
            .sum::<f64>(),
    );
    let vnorm = sqrt(dot(&v, &v));
    if resid > 1e-8 * a.frobenius_norm().max(1.0) * vnorm {
        return Err(Error::NumericFailure(alloc::format!(
            "eigenpair residual {resid:e} too large"
        )));
    }
    Ok(lambda)
}

/// Singular values in descending order, `min(rows, cols)` of them.
pub fn singular_values(a: &Matrix) -> Result<Vec<f64>> {
    if a.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFailure("non-finite matrix entry".into()));
    }
    let (rows, cols) = a.shape();
    // orthogonalize the shorter side's vectors
    let mut vecs: Vec<Vec<f64>> = if rows >= cols {
        let t = a.transpose();
        t.row_iter().map(<[f64]>::to_vec).collect()
    } else {
        a.row_iter().map(<[f64]>::to_vec).collect()
    };
    let n = vecs.len();
    let tol = 1e-15;

    let mut sweeps = 0;
    loop {
        if sweeps == MAX_SWEEPS {
            return Err(Error::NumericFailure(alloc::format!(
                "one-sided Jacobi did not converge in {MAX_SWEEPS} sweeps"
            )));
        }
        sweeps += 1;
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&vecs[p], &vecs[p]);
                let beta = dot(&vecs[q], &vecs[q]);
                let gamma = dot(&vecs[p], &vecs[q]);
                if gamma == 0.0 || gamma.abs() <= tol * sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = if zeta >= 0.0 {
                    1.0 / (zeta + sqrt(1.0 + zeta * zeta))
                } else {
                    -1.0 / (-zeta + sqrt(1.0 + zeta * zeta))
                };
                let c = 1.0 / sqrt(1.0 + t * t);
                let s = c * t;
                let (head, tail) = vecs.split_at_mut(q);
                let up = &mut head[p];
                let uq = &mut tail[0];
                for (x, y) in up.iter_mut().zip(uq.iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut values: Vec<f64> = vecs.iter().map(|v| sqrt(dot(v, v))).collect();
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(values)
}
