//! Dense linear-algebra kernels the rest of the crate builds on: sample
//! covariance, symmetric eigendecomposition, thin SVD, and the regularized
//! square-root / inverse-square-root factor pair.
//!
//! Everything here is a pure function over [`Matrix`]; results are
//! bit-identical across runs and thread counts.

mod eigen;
mod matrix;
mod svd;

pub use eigen::{sym_eig, SymEig};
pub use matrix::Matrix;
pub use svd::{svd, Svd};

use crate::error::{Error, Result};

/// Sample covariance `XᵀX / (B - 1)` of row-sample matrix `X` (B x ic).
///
/// The upper triangle is computed once and mirrored, so the result is
/// exactly symmetric.
pub fn covariance(x: &Matrix) -> Result<Matrix> {
    let b = x.rows();
    if b < 2 {
        return Err(Error::DegenerateSamples { min: 2, got: b });
    }
    let ic = x.cols();
    let inv = 1.0 / (b as f64 - 1.0);
    let mut c = Matrix::zeros(ic, ic);
    for i in 0..ic {
        for j in i..ic {
            let mut acc = 0.0;
            for t in 0..b {
                acc += x.get(t, i) * x.get(t, j);
            }
            let v = acc * inv;
            c.set(i, j, v);
            c.set(j, i, v);
        }
    }
    Ok(c)
}

/// Build the square-root factor pair of a PSD matrix from its eigenpairs:
/// `U_X = Q diag(max(λ, eps))^{1/2}` and `U_X⁻¹ = diag(max(λ, eps))^{-1/2} Qᵀ`.
///
/// Eigenvalues in `[-1e-9, 0)` are clamped to zero; anything more negative is
/// rejected as not PSD. With `eps = 0` a zero eigenvalue makes the factor
/// singular and is an error.
pub fn reg_inverse_sqrt_pair(eig: &SymEig, eps: f64) -> Result<(Matrix, Matrix)> {
    if eps < 0.0 {
        return Err(Error::Config(format!(
            "eps must be non-negative, got {eps}"
        )));
    }
    let mut regs = Vec::with_capacity(eig.eigenvalues.len());
    for &lam in &eig.eigenvalues {
        if lam < -1e-9 {
            return Err(Error::NotPositiveSemidefinite(lam));
        }
        let clamped = lam.max(0.0);
        let reg = clamped.max(eps);
        if reg == 0.0 {
            return Err(Error::SingularBasis);
        }
        regs.push(reg);
    }
    let q = &eig.eigenvectors;
    let n = q.rows();
    let mut u_x = Matrix::zeros(n, n);
    let mut u_x_inv = Matrix::zeros(n, n);
    for j in 0..n {
        let root = regs[j].sqrt();
        let inv_root = 1.0 / root;
        for i in 0..n {
            u_x.set(i, j, q.get(i, j) * root);
            u_x_inv.set(j, i, q.get(i, j) * inv_root);
        }
    }
    Ok((u_x, u_x_inv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn covariance_identity_case() {
        let x = Matrix::identity(2);
        let c = covariance(&x).unwrap();
        assert_eq!(c.data(), Matrix::identity(2).data());
    }

    #[test]
    fn covariance_rank_one_case() {
        let x = Matrix::from_vec(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let c = covariance(&x).unwrap();
        assert_eq!(c.data(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn covariance_matches_double_loop_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let x = Matrix::from_fn(8, 3, |_, _| rng.gen_range(-2.0..2.0));
        let c = covariance(&x).unwrap();
        // Independent brute-force oracle: explicit double loop over samples.
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for t in 0..8 {
                    acc += x.get(t, i) * x.get(t, j);
                }
                let expect = acc / 7.0;
                assert!((c.get(i, j) - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn covariance_rejects_single_sample() {
        let x = Matrix::zeros(1, 3);
        assert!(matches!(
            covariance(&x),
            Err(Error::DegenerateSamples { min: 2, got: 1 })
        ));
    }

    #[test]
    fn covariance_is_psd_over_many_draws() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let b = rng.gen_range(2..10);
            let ic = rng.gen_range(1..6);
            let x = Matrix::from_fn(b, ic, |_, _| rng.gen_range(-1.0..1.0));
            let c = covariance(&x).unwrap();
            let eig = sym_eig(&c).unwrap();
            let min = eig.eigenvalues.last().copied().unwrap();
            assert!(min >= -1e-10, "negative eigenvalue {min}");
        }
    }

    #[test]
    fn factor_pair_diagonal_case() {
        let eig = sym_eig(&Matrix::from_diag(&[4.0, 1.0])).unwrap();
        let (u_x, u_x_inv) = reg_inverse_sqrt_pair(&eig, 0.0).unwrap();
        assert_eq!(u_x.data(), Matrix::from_diag(&[2.0, 1.0]).data());
        assert_eq!(u_x_inv.data(), Matrix::from_diag(&[0.5, 1.0]).data());
        let prod = u_x.matmul(&u_x_inv).unwrap();
        assert!(prod.sub(&Matrix::identity(2)).unwrap().max_abs() <= 1e-8);
    }

    #[test]
    fn factor_pair_clamps_zero_eigenvalue() {
        let eig = sym_eig(&Matrix::from_diag(&[1.0, 0.0])).unwrap();
        let (u_x, _) = reg_inverse_sqrt_pair(&eig, 1e-6).unwrap();
        assert!((u_x.get(1, 1) - 1e-3).abs() < 1e-15);
        assert!(matches!(
            reg_inverse_sqrt_pair(&eig, 0.0),
            Err(Error::SingularBasis)
        ));
    }

    #[test]
    fn factor_pair_reconstructs_random_psd() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let g = Matrix::from_fn(9, 5, |_, _| rng.gen_range(-1.0..1.0));
        let c = covariance(&g).unwrap();
        let eig = sym_eig(&c).unwrap();
        let (u_x, u_x_inv) = reg_inverse_sqrt_pair(&eig, 0.0).unwrap();
        let rec = u_x.matmul(&u_x.transpose()).unwrap();
        let err = rec.sub(&c).unwrap().max_abs();
        assert!(err <= 1e-8 * c.max_abs(), "reconstruction error {err}");
        let prod = u_x.matmul(&u_x_inv).unwrap();
        assert!(prod.sub(&Matrix::identity(5)).unwrap().max_abs() <= 1e-8);
    }

    #[test]
    fn svd_eig_consistency_random() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        for _ in 0..20 {
            let m = rng.gen_range(2..9);
            let n = rng.gen_range(2..9);
            let a = Matrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
            let s = svd(&a).unwrap();
            let gram = a.transpose().matmul(&a).unwrap();
            let eig = sym_eig(&gram).unwrap();
            for j in 0..m.min(n) {
                let lam = eig.eigenvalues[j].max(0.0);
                let diff = (s.sigma[j] * s.sigma[j] - lam).abs();
                assert!(diff <= 1e-8 * lam.max(1.0));
            }
        }
    }
}
