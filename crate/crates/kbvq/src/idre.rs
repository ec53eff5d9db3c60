//! Input-driven redundancy elimination.
//!
//! Expert weight matrices in one MoE layer overlap heavily. This module
//! isolates that overlap: it builds an input-coherence basis `U_X` from the
//! calibration covariance (eigenvectors scaled by sqrt-eigenvalues, so that
//! Frobenius error in the projected space equals output mean-squared error),
//! projects every expert through it, stacks the projections row-wise, and
//! extracts the dominant rank-k right subspace of the stack. Each expert then
//! splits into `shared + specific`, where the shared part is a product of a
//! per-group factor and a small per-expert factor, and only the specific part
//! goes on to quantization.

use crate::error::{Error, Result};
use crate::numerics::{covariance, reg_inverse_sqrt_pair, svd, sym_eig, Matrix};

/// Input-coherence basis `U_X = Q diag(λ)^{1/2}` together with its
/// regularized inverse and the covariance eigenvalues it came from.
#[derive(Debug, Clone)]
pub struct KltBasis {
    pub u_x: Matrix,
    pub u_x_inv: Matrix,
    pub eigenvalues: Vec<f64>,
    pub eps_used: f64,
}

impl KltBasis {
    pub fn dim(&self) -> usize {
        self.u_x.rows()
    }

    /// Identity basis: projection becomes a no-op. Used for the
    /// "no input coherence" ablation arm.
    pub fn identity(ic: usize) -> Self {
        KltBasis {
            u_x: Matrix::identity(ic),
            u_x_inv: Matrix::identity(ic),
            eigenvalues: vec![1.0; ic],
            eps_used: 0.0,
        }
    }
}

/// A group of expert weight matrices with identical shape, e.g. all gate
/// projections of one MoE layer.
#[derive(Debug, Clone)]
pub struct ExpertGroup {
    experts: Vec<Matrix>,
    role_label: String,
}

impl ExpertGroup {
    pub fn new(experts: Vec<Matrix>, role_label: impl Into<String>) -> Result<Self> {
        if experts.is_empty() {
            return Err(Error::EmptyInput("expert group with no experts"));
        }
        let (oc, ic) = (experts[0].rows(), experts[0].cols());
        for (i, e) in experts.iter().enumerate() {
            if e.rows() != oc || e.cols() != ic {
                return Err(Error::Shape(format!(
                    "expert {i} is {}x{}, expected {oc}x{ic}",
                    e.rows(),
                    e.cols()
                )));
            }
        }
        Ok(Self {
            experts,
            role_label: role_label.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.experts.len()
    }

    pub fn oc(&self) -> usize {
        self.experts[0].rows()
    }

    pub fn ic(&self) -> usize {
        self.experts[0].cols()
    }

    pub fn experts(&self) -> &[Matrix] {
        &self.experts
    }

    pub fn expert(&self, i: usize) -> &Matrix {
        &self.experts[i]
    }

    pub fn role_label(&self) -> &str {
        &self.role_label
    }
}

/// Rank-k shared factorization of a stacked expert group.
///
/// `shared_i = v_private[i] * u_share`; the singular values are absorbed
/// into the per-expert factors so `u_share` is stored once per group.
#[derive(Debug, Clone)]
pub struct SharedDecomposition {
    /// k x ic, mapped back through the inverse basis.
    pub u_share: Matrix,
    /// One oc x k factor per expert, singular values absorbed.
    pub v_private: Vec<Matrix>,
    /// Full squared-singular-value spectrum of the stacked matrix,
    /// descending.
    pub spectrum: Vec<f64>,
    pub k: usize,
}

/// Per-expert split `shared[i] + specific[i] = W[i]` (exact by construction).
#[derive(Debug, Clone)]
pub struct SplitWeights {
    pub shared: Vec<Matrix>,
    pub specific: Vec<Matrix>,
}

/// Build the input-coherence basis from calibration activations.
///
/// The regularization floor is `eps_rel * λ_max`, guarding the inverse
/// against near-singular calibration covariance.
pub fn build_klt_basis(x: &Matrix, eps_rel: f64) -> Result<KltBasis> {
    let c = covariance(x)?;
    let eig = sym_eig(&c)?;
    let lam_max = eig.eigenvalues.first().copied().unwrap_or(0.0).max(0.0);
    let eps = eps_rel * lam_max;
    let (u_x, u_x_inv) = reg_inverse_sqrt_pair(&eig, eps)?;
    Ok(KltBasis {
        u_x,
        u_x_inv,
        eigenvalues: eig.eigenvalues,
        eps_used: eps,
    })
}

/// Project every expert through the basis and stack the results row-wise
/// into one `(n*oc) x ic` matrix, preserving expert order.
pub fn project_and_stack(group: &ExpertGroup, basis: &KltBasis) -> Result<Matrix> {
    if group.ic() != basis.dim() {
        return Err(Error::Shape(format!(
            "group ic {} does not match basis dim {}",
            group.ic(),
            basis.dim()
        )));
    }
    let projected: Vec<Matrix> = group
        .experts
        .iter()
        .map(|w| w.matmul(&basis.u_x))
        .collect::<Result<_>>()?;
    let refs: Vec<&Matrix> = projected.iter().collect();
    Matrix::vstack(&refs)
}

/// Extract the rank-k shared subspace from a stacked projection.
///
/// With thin SVD `stacked = A diag(σ) Bᵀ`, the group factor is
/// `u_share = B_kᵀ U_X⁻¹` and expert `i` keeps `v_private[i] = A_k^(i) diag(σ_k)`
/// where `A_k^(i)` is its oc x k row block. If `k` exceeds the number of
/// singular values the extra directions carry no energy, so the effective
/// rank is clamped to the spectrum length.
pub fn extract_shared(
    stacked: &Matrix,
    basis: &KltBasis,
    n_experts: usize,
    k: usize,
) -> Result<SharedDecomposition> {
    let ic = stacked.cols();
    if k < 1 || k > ic {
        return Err(Error::RankOutOfRange { k, min: 1, max: ic });
    }
    if n_experts == 0 || stacked.rows() % n_experts != 0 {
        return Err(Error::Shape(format!(
            "{} stacked rows do not divide into {n_experts} experts",
            stacked.rows()
        )));
    }
    if basis.dim() != ic {
        return Err(Error::Shape(format!(
            "basis dim {} does not match stacked width {ic}",
            basis.dim()
        )));
    }
    let oc = stacked.rows() / n_experts;

    let dec = svd(stacked)?;
    let spectrum: Vec<f64> = dec.sigma.iter().map(|s| s * s).collect();
    let k_eff = k.min(spectrum.len());

    // u_share = B_kᵀ U_X⁻¹  (k x ic); rows of vt are Bᵀ already.
    let bt_k = dec.vt.row_block(0, k_eff)?;
    let u_share = bt_k.matmul(&basis.u_x_inv)?;

    let mut v_private = Vec::with_capacity(n_experts);
    for i in 0..n_experts {
        let a_block = dec.u.row_block(i * oc, oc)?;
        let mut v = Matrix::zeros(oc, k_eff);
        for r in 0..oc {
            for c in 0..k_eff {
                v.set(r, c, a_block.get(r, c) * dec.sigma[c]);
            }
        }
        v_private.push(v);
    }

    Ok(SharedDecomposition {
        u_share,
        v_private,
        spectrum,
        k: k_eff,
    })
}

/// Split each expert into its shared reconstruction and the residual that
/// will be quantized. The sum returns the original exactly.
pub fn split_experts(group: &ExpertGroup, decomp: &SharedDecomposition) -> Result<SplitWeights> {
    if decomp.v_private.len() != group.n() {
        return Err(Error::Shape(format!(
            "decomposition has {} experts, group has {}",
            decomp.v_private.len(),
            group.n()
        )));
    }
    if decomp.u_share.cols() != group.ic() {
        return Err(Error::Shape(format!(
            "u_share width {} does not match group ic {}",
            decomp.u_share.cols(),
            group.ic()
        )));
    }
    let mut shared = Vec::with_capacity(group.n());
    let mut specific = Vec::with_capacity(group.n());
    for (w, v) in group.experts.iter().zip(&decomp.v_private) {
        let s = v.matmul(&decomp.u_share)?;
        let q = w.sub(&s)?;
        shared.push(s);
        specific.push(q);
    }
    Ok(SplitWeights { shared, specific })
}

/// Fraction of stacked energy captured by the top-k subspace:
/// `ρ_k = Σ_{j<=k} σ_j² / Σ_j σ_j²`.
pub fn redundancy_ratio(spectrum: &[f64], k: usize) -> Result<f64> {
    if k > spectrum.len() {
        return Err(Error::RankOutOfRange {
            k,
            min: 0,
            max: spectrum.len(),
        });
    }
    let total: f64 = spectrum.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroSpectrum);
    }
    let head: f64 = spectrum[..k].iter().sum();
    Ok(head / total)
}

/// Output-weighted squared error `Tr(E C_X Eᵀ)`.
///
/// Equals `‖E U_X‖_F²` whenever `U_X U_Xᵀ = C_X`, which is what makes
/// Frobenius norms in the coherence space speak for output MSE.
pub fn weighted_output_mse(e: &Matrix, c_x: &Matrix) -> Result<f64> {
    if c_x.rows() != c_x.cols() || e.cols() != c_x.rows() {
        return Err(Error::Shape(format!(
            "weighted mse of {}x{} against covariance {}x{}",
            e.rows(),
            e.cols(),
            c_x.rows(),
            c_x.cols()
        )));
    }
    let ec = e.matmul(c_x)?;
    let mut tr = 0.0;
    for i in 0..e.rows() {
        for j in 0..e.cols() {
            tr += ec.get(i, j) * e.get(i, j);
        }
    }
    Ok(tr)
}
