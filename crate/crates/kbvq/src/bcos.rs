//! Bias-corrected output stabilization.
//!
//! Quantization shifts the mean and variance of each output channel, and an
//! MoE layer amplifies the shift when it aggregates experts. The fix is a
//! per-channel affine map `y_corr = (1+s) ⊙ ŷ + b` fitted on calibration
//! data. Two closed forms are available: `variance_match` (the ratio of
//! standard deviations, which restores the channel mean and variance
//! exactly) and `mmse_regression` (the least-squares slope, which minimizes
//! per-channel squared error).
//!
//! Channel statistics use the population (1/N) convention on both sides, so
//! every ratio is convention-free.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Threshold below which a channel's spread counts as degenerate.
const DEGENERATE_STD: f64 = 1e-12;

/// Per-output-channel calibration statistics.
#[derive(Debug, Clone)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    /// Population standard deviation.
    pub std: Vec<f64>,
    pub count: usize,
    /// `Cov(y_j, ŷ_j)` against the reference stream, when computed jointly.
    pub cov_with_ref: Option<Vec<f64>>,
}

impl ChannelStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Fitted correction: `y_corr = (1 + s) ⊙ ŷ + b` per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasCorrection {
    pub s: Vec<f64>,
    pub b: Vec<f64>,
    pub method: CorrectionMethod,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrectionMethod {
    VarianceMatch,
    MmseRegression,
}

impl BiasCorrection {
    /// The do-nothing correction (`s = b = 0`).
    pub fn identity(oc: usize) -> Self {
        BiasCorrection {
            s: vec![0.0; oc],
            b: vec![0.0; oc],
            method: CorrectionMethod::VarianceMatch,
        }
    }

    pub fn channels(&self) -> usize {
        self.s.len()
    }

    pub fn is_identity(&self) -> bool {
        self.s.iter().all(|&v| v == 0.0) && self.b.iter().all(|&v| v == 0.0)
    }
}

/// Per-channel stats of two paired output streams (same tokens, same order).
/// The second result carries `Cov(y_j, ŷ_j)`.
pub fn collect_output_stats(y: &Matrix, y_hat: &Matrix) -> Result<(ChannelStats, ChannelStats)> {
    if y.rows() != y_hat.rows() || y.cols() != y_hat.cols() {
        return Err(Error::Shape(format!(
            "paired streams {}x{} vs {}x{}",
            y.rows(),
            y.cols(),
            y_hat.rows(),
            y_hat.cols()
        )));
    }
    let b = y.rows();
    if b < 2 {
        return Err(Error::DegenerateSamples { min: 2, got: b });
    }
    let oc = y.cols();
    let inv = 1.0 / b as f64;

    let mut mean_y = vec![0.0; oc];
    let mut mean_h = vec![0.0; oc];
    for t in 0..b {
        for j in 0..oc {
            mean_y[j] += y.get(t, j);
            mean_h[j] += y_hat.get(t, j);
        }
    }
    for j in 0..oc {
        mean_y[j] *= inv;
        mean_h[j] *= inv;
    }

    let mut var_y = vec![0.0; oc];
    let mut var_h = vec![0.0; oc];
    let mut cov = vec![0.0; oc];
    for t in 0..b {
        for j in 0..oc {
            let dy = y.get(t, j) - mean_y[j];
            let dh = y_hat.get(t, j) - mean_h[j];
            var_y[j] += dy * dy;
            var_h[j] += dh * dh;
            cov[j] += dy * dh;
        }
    }
    let std_y: Vec<f64> = var_y.iter().map(|v| (v * inv).sqrt()).collect();
    let std_h: Vec<f64> = var_h.iter().map(|v| (v * inv).sqrt()).collect();
    for c in cov.iter_mut() {
        *c *= inv;
    }

    Ok((
        ChannelStats {
            mean: mean_y,
            std: std_y,
            count: b,
            cov_with_ref: None,
        },
        ChannelStats {
            mean: mean_h,
            std: std_h,
            count: b,
            cov_with_ref: Some(cov),
        },
    ))
}

/// Push calibration inputs through both weight matrices and collect paired
/// channel statistics of `y = x Wᵀ` and `ŷ = x Ŵᵀ`.
pub fn collect_paired_stats(
    w: &Matrix,
    w_hat: &Matrix,
    x: &Matrix,
) -> Result<(ChannelStats, ChannelStats)> {
    if w.rows() != w_hat.rows() || w.cols() != w_hat.cols() {
        return Err(Error::Shape(format!(
            "weights {}x{} vs {}x{}",
            w.rows(),
            w.cols(),
            w_hat.rows(),
            w_hat.cols()
        )));
    }
    if x.cols() != w.cols() {
        return Err(Error::Shape(format!(
            "calibration width {} vs weight ic {}",
            x.cols(),
            w.cols()
        )));
    }
    let y = x.matmul(&w.transpose())?;
    let y_hat = x.matmul(&w_hat.transpose())?;
    collect_output_stats(&y, &y_hat)
}

/// Moment-matching fit: `s_j = σ_y/σ_ŷ - 1`, `b_j = μ_y - (1+s_j) μ_ŷ`.
/// Degenerate channels (σ_ŷ ≈ 0) fall back to a pure mean shift.
pub fn fit_variance_match(
    stats_y: &ChannelStats,
    stats_yhat: &ChannelStats,
) -> Result<BiasCorrection> {
    let oc = check_channels(stats_y, stats_yhat)?;
    let mut s = Vec::with_capacity(oc);
    let mut b = Vec::with_capacity(oc);
    for j in 0..oc {
        if stats_yhat.std[j] < DEGENERATE_STD {
            s.push(0.0);
            b.push(stats_y.mean[j] - stats_yhat.mean[j]);
        } else {
            let sj = stats_y.std[j] / stats_yhat.std[j] - 1.0;
            s.push(sj);
            b.push(stats_y.mean[j] - (1.0 + sj) * stats_yhat.mean[j]);
        }
    }
    Ok(BiasCorrection {
        s,
        b,
        method: CorrectionMethod::VarianceMatch,
    })
}

/// Least-squares fit: slope `α_j = Cov(y_j, ŷ_j) / Var(ŷ_j)`, `s_j = α_j - 1`,
/// `b_j = μ_y - α_j μ_ŷ`. Degenerate variance collapses to the channel mean.
pub fn fit_mmse_regression(
    stats_y: &ChannelStats,
    stats_yhat: &ChannelStats,
) -> Result<BiasCorrection> {
    let oc = check_channels(stats_y, stats_yhat)?;
    let cov = stats_yhat
        .cov_with_ref
        .as_ref()
        .ok_or(Error::MissingCovariance)?;
    if cov.len() != oc {
        return Err(Error::Shape(format!(
            "covariance has {} channels, stats have {oc}",
            cov.len()
        )));
    }
    let mut s = Vec::with_capacity(oc);
    let mut b = Vec::with_capacity(oc);
    for j in 0..oc {
        let var = stats_yhat.std[j] * stats_yhat.std[j];
        if var < DEGENERATE_STD {
            s.push(-1.0); // alpha = 0
            b.push(stats_y.mean[j]);
        } else {
            let alpha = cov[j] / var;
            s.push(alpha - 1.0);
            b.push(stats_y.mean[j] - alpha * stats_yhat.mean[j]);
        }
    }
    Ok(BiasCorrection {
        s,
        b,
        method: CorrectionMethod::MmseRegression,
    })
}

fn check_channels(a: &ChannelStats, b: &ChannelStats) -> Result<usize> {
    if a.channels() != b.channels() {
        return Err(Error::Shape(format!(
            "channel counts {} vs {}",
            a.channels(),
            b.channels()
        )));
    }
    Ok(a.channels())
}

/// Apply `(1+s) ⊙ ŷ + b` channel-wise across a batch.
pub fn apply_correction(y_hat: &Matrix, corr: &BiasCorrection) -> Result<Matrix> {
    if y_hat.cols() != corr.channels() {
        return Err(Error::Shape(format!(
            "{} output channels vs correction for {}",
            y_hat.cols(),
            corr.channels()
        )));
    }
    let mut out = y_hat.clone();
    let oc = y_hat.cols();
    for t in 0..y_hat.rows() {
        for j in 0..oc {
            let v = (1.0 + corr.s[j]) * y_hat.get(t, j) + corr.b[j];
            out.set(t, j, v);
        }
    }
    Ok(out)
}

/// Apply a correction to a single output vector in place.
pub fn apply_correction_row(row: &mut [f64], corr: &BiasCorrection) {
    debug_assert_eq!(row.len(), corr.channels());
    for (j, v) in row.iter_mut().enumerate() {
        *v = (1.0 + corr.s[j]) * *v + corr.b[j];
    }
}
