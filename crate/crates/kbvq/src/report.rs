//! Compression accounting: predicted storage from the closed-form bit
//! budget, and measured storage from actual serialized bundles.
//!
//! For an n-expert group of m x l matrices the total bit count is
//!
//! ```text
//! 16 (m + l n) min(m, l) k  +  m l b n  +  2^(b v + 4) v n  +  32 l n
//! ```
//!
//! shared low-rank factors at 16 bits, packed codeword indices at b bits per
//! weight, per-expert codebooks of `2^(bv)` length-v codewords at 16 bits,
//! and two correction parameters per channel. Effective bits per weight is
//! the total divided by `n m l`; the compression ratio is measured against
//! the 16-bit baseline.

use crate::error::{Error, Result};
use serde::Serialize;

/// Inputs to the closed-form budget.
#[derive(Debug, Clone)]
pub struct BitBudget {
    /// Expert output dimension.
    pub m: usize,
    /// Expert input dimension.
    pub l: usize,
    /// Expert count.
    pub n: usize,
    /// Shared-subspace rank as a fraction of `min(m, l)`; 0 disables the
    /// shared term entirely.
    pub k_ratio: f64,
    /// Sub-vector length.
    pub v: usize,
    /// Bits per weight.
    pub b: u32,
    pub include_bcos: bool,
    /// Count the codebook itself. Off only for idealized identities such as
    /// the 16-bit passthrough check.
    pub include_codebook: bool,
}

impl BitBudget {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.l == 0 || self.n == 0 || self.v == 0 || self.b == 0 {
            return Err(Error::Config("bit budget requires positive counts".into()));
        }
        if !(0.0..=1.0).contains(&self.k_ratio) {
            return Err(Error::Config(format!(
                "k_ratio {} outside [0, 1]",
                self.k_ratio
            )));
        }
        if self.b as usize * self.v > 24 {
            return Err(Error::Config(format!(
                "b*v = {} exceeds the 24-bit codebook guard",
                self.b as usize * self.v
            )));
        }
        Ok(())
    }
}

/// Storage accounting for one quantized group, predicted or measured.
#[derive(Debug, Clone, Serialize)]
pub struct CompressionReport {
    pub fp16_bits: f64,
    pub shared_bits: f64,
    pub index_bits: f64,
    pub codebook_bits: f64,
    pub bcos_bits: f64,
    /// Framing overhead (headers, manifest) for measured bundles; zero for
    /// formula predictions.
    pub overhead_bits: f64,
    pub total_bits: f64,
    /// `total / (n m l)`.
    pub effective_bits_per_weight: f64,
    /// `1 - total / fp16` as a fraction in [0, 1].
    pub compression_ratio: f64,
}

impl CompressionReport {
    fn from_components(
        fp16_bits: f64,
        shared_bits: f64,
        index_bits: f64,
        codebook_bits: f64,
        bcos_bits: f64,
        overhead_bits: f64,
        weight_count: f64,
    ) -> Self {
        let total_bits = shared_bits + index_bits + codebook_bits + bcos_bits + overhead_bits;
        CompressionReport {
            fp16_bits,
            shared_bits,
            index_bits,
            codebook_bits,
            bcos_bits,
            overhead_bits,
            total_bits,
            effective_bits_per_weight: total_bits / weight_count,
            compression_ratio: 1.0 - total_bits / fp16_bits,
        }
    }

    /// Total size in binary gigabytes (2^30 bytes), the unit the accounting
    /// convention reports as "GB".
    pub fn total_gb(&self) -> f64 {
        self.total_bits / 8.0 / (1u64 << 30) as f64
    }

    pub fn fp16_gb(&self) -> f64 {
        self.fp16_bits / 8.0 / (1u64 << 30) as f64
    }

    /// Compression ratio rounded to a whole percent.
    pub fn ratio_percent(&self) -> f64 {
        (self.compression_ratio * 100.0).round()
    }

    /// Bits per weight implied by the whole-percent ratio,
    /// `16 (1 - percent/100)`. This is the headline figure the percent-level
    /// accounting reports; the exact value is
    /// [`Self::effective_bits_per_weight`].
    pub fn bits_at_percent_resolution(&self) -> f64 {
        16.0 * (1.0 - self.ratio_percent() / 100.0)
    }

    /// Extra bits per weight paid on top of the raw index payload.
    pub fn overhead_bits_per_weight(&self, b: u32) -> f64 {
        self.effective_bits_per_weight - b as f64
    }
}

/// Evaluate the closed-form budget.
pub fn effective_bits(budget: &BitBudget) -> Result<CompressionReport> {
    budget.validate()?;
    let (m, l, n) = (budget.m as f64, budget.l as f64, budget.n as f64);
    let min_ml = budget.m.min(budget.l) as f64;
    let weight_count = n * m * l;

    let fp16_bits = 16.0 * weight_count;
    let shared_bits = 16.0 * (m + l * n) * min_ml * budget.k_ratio;
    let index_bits = m * l * budget.b as f64 * n;
    let codebook_bits = if budget.include_codebook {
        let k = (1u64 << (budget.b as usize * budget.v)) as f64;
        k * budget.v as f64 * 16.0 * n
    } else {
        0.0
    };
    let bcos_bits = if budget.include_bcos {
        2.0 * l * n * 16.0
    } else {
        0.0
    };

    Ok(CompressionReport::from_components(
        fp16_bits,
        shared_bits,
        index_bits,
        codebook_bits,
        bcos_bits,
        0.0,
        weight_count,
    ))
}

/// Byte counts of a serialized bundle, as measured by the bundle reader.
#[derive(Debug, Clone, Default)]
pub struct MeasuredSections {
    pub shared_bytes: u64,
    pub index_bytes: u64,
    pub codebook_bytes: u64,
    pub bcos_bytes: u64,
    pub overhead_bytes: u64,
    /// Total weight count covered by the bundle (sum of n*oc*ic over groups).
    pub weight_count: usize,
}

/// Turn measured section sizes into the same report shape the formula
/// produces, so the two can be compared directly.
pub fn report_from_sections(s: &MeasuredSections) -> Result<CompressionReport> {
    if s.weight_count == 0 {
        return Err(Error::Config("measured sections missing shape info".into()));
    }
    let weight_count = s.weight_count as f64;
    Ok(CompressionReport::from_components(
        16.0 * weight_count,
        s.shared_bytes as f64 * 8.0,
        s.index_bytes as f64 * 8.0,
        s.codebook_bytes as f64 * 8.0,
        s.bcos_bytes as f64 * 8.0,
        s.overhead_bytes as f64 * 8.0,
        weight_count,
    ))
}

/// Storage accounting from an actual serialized bundle: integrity-checked
/// byte counts per section category, including framing overhead.
pub fn measure_actual(path: &std::path::Path) -> Result<CompressionReport> {
    let bytes = std::fs::read(path)?;
    let (_, measured) = crate::bundle::QuantizedBundle::deserialize_measuring(&bytes)?;
    report_from_sections(&measured)
}

/// RTN accounting: `b` bits per weight plus one 16-bit scale per group
/// (and a 16-bit offset in the affine variant).
pub fn rtn_effective_bits(
    m: usize,
    l: usize,
    n: usize,
    b: u32,
    group_size: usize,
    symmetric: bool,
) -> Result<CompressionReport> {
    if m == 0 || l == 0 || n == 0 || group_size == 0 || b == 0 {
        return Err(Error::Config("rtn budget requires positive counts".into()));
    }
    let weight_count = (n * m * l) as f64;
    let groups_per_expert = (m * l).div_ceil(group_size) as f64;
    let params_per_group = if symmetric { 1.0 } else { 2.0 };
    let scale_bits = groups_per_expert * params_per_group * 16.0 * n as f64;
    Ok(CompressionReport::from_components(
        16.0 * weight_count,
        0.0,
        b as f64 * weight_count,
        0.0,
        scale_bits,
        0.0,
        weight_count,
    ))
}
