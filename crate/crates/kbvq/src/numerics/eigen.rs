//! Symmetric eigendecomposition via cyclic Jacobi rotations.
//!
//! Jacobi is unconditionally stable for real symmetric matrices and, being a
//! fixed sequential sweep, gives bit-identical results across runs and thread
//! counts. That determinism matters more here than the asymptotic edge a QR
//! solver would have at these sizes.

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Eigenpairs of a symmetric matrix, sorted by descending eigenvalue.
///
/// Columns of `eigenvectors` are orthonormal and follow a fixed sign
/// convention: the largest-magnitude component of each vector is positive.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

const MAX_SWEEPS: usize = 100;

/// Eigendecomposition of a symmetric matrix.
///
/// The input is symmetrized as `(C + Cᵀ)/2` first; it must already be
/// symmetric to within 1e-9 of its largest entry.
pub fn sym_eig(c: &Matrix) -> Result<SymEig> {
    let n = c.rows();
    if n != c.cols() {
        return Err(Error::Shape(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            n,
            c.cols()
        )));
    }
    let scale = c.max_abs().max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            if (c.get(i, j) - c.get(j, i)).abs() > 1e-9 * scale {
                return Err(Error::Shape(format!(
                    "matrix not symmetric at ({i},{j}): {} vs {}",
                    c.get(i, j),
                    c.get(j, i)
                )));
            }
        }
    }

    let mut a = Matrix::from_fn(n, n, |i, j| 0.5 * (c.get(i, j) + c.get(j, i)));
    let mut q = Matrix::identity(n);

    let tol = 1e-15 * a.max_abs().max(f64::MIN_POSITIVE);
    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for r in (p + 1)..n {
                off += a.get(p, r).abs();
            }
        }
        if off <= tol {
            converged = true;
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for r in (p + 1)..n {
                rotate(&mut a, &mut q, p, r);
            }
        }
    }
    if !converged {
        // Final check after the last sweep.
        let mut off = 0.0;
        for p in 0..n {
            for r in (p + 1)..n {
                off += a.get(p, r).abs();
            }
        }
        if off > tol {
            return Err(Error::NoConvergence(MAX_SWEEPS));
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a.get(j, j)
            .partial_cmp(&a.get(i, i))
            .unwrap()
            .then(i.cmp(&j))
    });

    let eigenvalues: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for row in 0..n {
            eigenvectors.set(row, dst, q.get(row, src));
        }
    }
    fix_column_signs(&mut eigenvectors);

    Ok(SymEig {
        eigenvalues,
        eigenvectors,
    })
}

/// One Jacobi rotation annihilating `a[p][r]`.
fn rotate(a: &mut Matrix, q: &mut Matrix, p: usize, r: usize) {
    let apr = a.get(p, r);
    if apr == 0.0 {
        return;
    }
    let app = a.get(p, p);
    let arr = a.get(r, r);
    let theta = (arr - app) / (2.0 * apr);
    // Smaller-angle root of t^2 + 2 t theta - 1 = 0.
    let t = if theta >= 0.0 {
        1.0 / (theta + (1.0 + theta * theta).sqrt())
    } else {
        -1.0 / (-theta + (1.0 + theta * theta).sqrt())
    };
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = t * c;

    let n = a.rows();
    for i in 0..n {
        let aip = a.get(i, p);
        let air = a.get(i, r);
        a.set(i, p, c * aip - s * air);
        a.set(i, r, s * aip + c * air);
    }
    for j in 0..n {
        let apj = a.get(p, j);
        let arj = a.get(r, j);
        a.set(p, j, c * apj - s * arj);
        a.set(r, j, s * apj + c * arj);
    }
    a.set(p, r, 0.0);
    a.set(r, p, 0.0);
    a.set(p, p, app - t * apr);
    a.set(r, r, arr + t * apr);

    for i in 0..n {
        let qip = q.get(i, p);
        let qir = q.get(i, r);
        q.set(i, p, c * qip - s * qir);
        q.set(i, r, s * qip + c * qir);
    }
}

/// Flip each column so its largest-magnitude entry is positive. On magnitude
/// ties the first occurrence decides, keeping the convention deterministic.
pub(crate) fn fix_column_signs(m: &mut Matrix) {
    let (rows, cols) = (m.rows(), m.cols());
    for j in 0..cols {
        let mut best = 0usize;
        let mut best_abs = m.get(0, j).abs();
        for i in 1..rows {
            let a = m.get(i, j).abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if m.get(best, j) < 0.0 {
            for i in 0..rows {
                let v = m.get(i, j);
                m.set(i, j, -v);
            }
        }
    }
}
