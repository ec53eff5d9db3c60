//! Thin singular value decomposition through the Gram matrix.
//!
//! For `A` with `n <= m` we eigendecompose `AᵀA`, take `V` from the
//! eigenvectors and recover `U = A V Σ⁻¹`; for wide matrices the roles swap.
//! Columns belonging to (near-)zero singular values are completed from
//! canonical basis vectors so both factors stay orthonormal, and a modified
//! Gram-Schmidt pass cleans up clustered-singular-value drift.

use super::eigen::sym_eig;
use super::matrix::Matrix;
use crate::error::Result;

/// Thin SVD `A = U diag(σ) Vᵀ` with `r = min(rows, cols)` components.
///
/// Singular values are non-negative and sorted descending; `u` has
/// orthonormal columns, `vt` orthonormal rows.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub vt: Matrix,
}

pub fn svd(a: &Matrix) -> Result<Svd> {
    let (m, n) = (a.rows(), a.cols());
    if n <= m {
        let gram = a.transpose().matmul(a)?;
        let eig = sym_eig(&gram)?;
        let sigma = sigmas_from_gram(&eig.eigenvalues);
        let v = eig.eigenvectors; // n x n
        let u = recover_side(a, &v, &sigma)?; // m x n
        Ok(Svd {
            u,
            sigma,
            vt: v.transpose(),
        })
    } else {
        let gram = a.matmul(&a.transpose())?;
        let eig = sym_eig(&gram)?;
        let sigma = sigmas_from_gram(&eig.eigenvalues);
        let u = eig.eigenvectors; // m x m
        let at = a.transpose();
        let v = recover_side(&at, &u, &sigma)?; // n x m
        Ok(Svd {
            u,
            sigma,
            vt: v.transpose(),
        })
    }
}

/// Singular values from Gram eigenvalues. Eigenvalues below `1e-12 * λ_max`
/// are numerically indistinguishable from zero at Gram precision and are
/// truncated, so rank-deficient inputs report exact zeros.
fn sigmas_from_gram(eigenvalues: &[f64]) -> Vec<f64> {
    let lam_max = eigenvalues.first().copied().unwrap_or(0.0).max(0.0);
    let cutoff = lam_max * 1e-12;
    eigenvalues
        .iter()
        .map(|&l| if l <= cutoff { 0.0 } else { l.sqrt() })
        .collect()
}

/// Given `a` (m x n) and orthonormal right factor `v` (n x r) with singular
/// values `sigma`, produce the matching left factor `a v / sigma`, completing
/// and re-orthonormalizing degenerate columns.
///
/// The sign convention lives on the Gram-eigenvector factor; the recovered
/// side inherits whatever sign keeps `A = U diag(σ) Vᵀ` exact.
fn recover_side(a: &Matrix, v: &Matrix, sigma: &[f64]) -> Result<Matrix> {
    let m = a.rows();
    let r = sigma.len();
    let av = a.matmul(v)?;
    let sig_max = sigma.first().copied().unwrap_or(0.0);
    let cutoff = sig_max * 1e-12;

    let mut u = Matrix::zeros(m, r);
    for j in 0..r {
        if sigma[j] > cutoff && sigma[j] > 0.0 {
            let inv = 1.0 / sigma[j];
            for i in 0..m {
                u.set(i, j, av.get(i, j) * inv);
            }
        }
        // Zero columns are filled by the orthonormalization pass below.
    }
    orthonormalize_columns(&mut u);
    Ok(u)
}

/// In-place modified Gram-Schmidt. Columns that vanish (zero input or linear
/// dependence) are replaced by the first canonical basis vector that keeps
/// the set orthonormal, scanned in index order for determinism.
fn orthonormalize_columns(u: &mut Matrix) {
    let (m, r) = (u.rows(), u.cols());
    debug_assert!(r <= m);
    for j in 0..r {
        for prev in 0..j {
            let mut dot = 0.0;
            for i in 0..m {
                dot += u.get(i, prev) * u.get(i, j);
            }
            for i in 0..m {
                let v = u.get(i, j) - dot * u.get(i, prev);
                u.set(i, j, v);
            }
        }
        let mut norm2 = 0.0;
        for i in 0..m {
            norm2 += u.get(i, j) * u.get(i, j);
        }
        if norm2.sqrt() > 1e-7 {
            let inv = 1.0 / norm2.sqrt();
            for i in 0..m {
                let v = u.get(i, j) * inv;
                u.set(i, j, v);
            }
        } else {
            // Deterministic completion from canonical basis vectors.
            let mut replaced = false;
            for cand in 0..m {
                let mut col = vec![0.0; m];
                col[cand] = 1.0;
                for prev in 0..j {
                    let mut dot = 0.0;
                    for i in 0..m {
                        dot += u.get(i, prev) * col[i];
                    }
                    for i in 0..m {
                        col[i] -= dot * u.get(i, prev);
                    }
                }
                let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.5 {
                    for i in 0..m {
                        u.set(i, j, col[i] / norm);
                    }
                    replaced = true;
                    break;
                }
            }
            debug_assert!(replaced, "could not complete orthonormal basis");
        }
    }
}
