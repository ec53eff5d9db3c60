//! Reference quantizers for ablations: group-wise round-to-nearest scalar
//! quantization and plain vector quantization of the whole matrix (no shared
//! extraction, no output correction).

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::vq::{quantize_matrix, QuantizedTensor, VqConfig};

#[derive(Debug, Clone)]
pub struct RtnConfig {
    pub bits: u32,
    /// Weights per scale group over the row-major flattening.
    pub group_size: usize,
    /// Symmetric grid around zero; otherwise affine min/max mapping.
    pub symmetric: bool,
}

impl Default for RtnConfig {
    fn default() -> Self {
        RtnConfig {
            bits: 2,
            group_size: 128,
            symmetric: true,
        }
    }
}

impl RtnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(Error::Config(format!(
                "rtn bits {} outside [2, 8]",
                self.bits
            )));
        }
        if self.group_size == 0 {
            return Err(Error::Config("rtn group_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Quantize-round-dequantize each group of the row-major flattening.
///
/// Symmetric: `scale = max|w| / (2^(b-1) - 1)`, grid `{-q_max..q_max} * scale`.
/// Affine: `scale = (max - min) / (2^b - 1)`, grid anchored at the group
/// minimum. Both keep every element within `scale/2` of the original and are
/// idempotent on already-quantized values.
pub fn rtn_quantize(w: &Matrix, cfg: &RtnConfig) -> Result<Matrix> {
    cfg.validate()?;
    let mut data = w.data().to_vec();
    for group in data.chunks_mut(cfg.group_size) {
        if cfg.symmetric {
            let q_max = ((1u32 << (cfg.bits - 1)) - 1) as f64;
            let max_abs = group.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            if max_abs == 0.0 {
                continue;
            }
            let scale = max_abs / q_max;
            for v in group.iter_mut() {
                let q = (*v / scale).round().clamp(-q_max, q_max);
                *v = q * scale;
            }
        } else {
            let levels = ((1u32 << cfg.bits) - 1) as f64;
            let min = group.iter().fold(f64::INFINITY, |m, &v| m.min(v));
            let max = group.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            if max == min {
                continue;
            }
            let scale = (max - min) / levels;
            for v in group.iter_mut() {
                let q = ((*v - min) / scale).round().clamp(0.0, levels);
                *v = q * scale + min;
            }
        }
    }
    Matrix::from_vec(w.rows(), w.cols(), data)
}

/// Plain VQ baseline: the full weight matrix through the same quantizer,
/// with no shared-part split and no bias correction.
pub fn plain_vq_quantize(w: &Matrix, cfg: &VqConfig) -> Result<QuantizedTensor> {
    quantize_matrix(w, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn rtn_two_bit_symmetric_hand_grid() {
        // b=2 symmetric: q_max = 1, scale = 1, grid {-1, 0, 1}.
        let w = Matrix::from_vec(1, 2, vec![-1.0, 1.0]).unwrap();
        let cfg = RtnConfig {
            bits: 2,
            group_size: 2,
            symmetric: true,
        };
        let out = rtn_quantize(&w, &cfg).unwrap();
        assert_eq!(out.data(), &[-1.0, 1.0]);

        let w = Matrix::from_vec(1, 4, vec![-1.0, -0.4, 0.4, 1.0]).unwrap();
        let cfg = RtnConfig {
            bits: 2,
            group_size: 4,
            symmetric: true,
        };
        let out = rtn_quantize(&w, &cfg).unwrap();
        assert_eq!(out.data(), &[-1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn rtn_idempotent() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let w = Matrix::from_fn(4, 9, |_, _| rng.gen_range(-3.0..3.0));
        for symmetric in [true, false] {
            let cfg = RtnConfig {
                bits: 3,
                group_size: 7,
                symmetric,
            };
            let once = rtn_quantize(&w, &cfg).unwrap();
            let twice = rtn_quantize(&once, &cfg).unwrap();
            assert_eq!(once.data(), twice.data(), "symmetric={symmetric}");
        }
    }

    #[test]
    fn rtn_error_bound() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let w = Matrix::from_fn(8, 16, |_, _| rng.gen_range(-5.0..5.0));
        for symmetric in [true, false] {
            for bits in [2u32, 4, 8] {
                let cfg = RtnConfig {
                    bits,
                    group_size: 10,
                    symmetric,
                };
                let out = rtn_quantize(&w, &cfg).unwrap();
                for (g, (orig, quant)) in w.data().chunks(10).zip(out.data().chunks(10)).enumerate()
                {
                    let scale = if symmetric {
                        let q_max = ((1u32 << (bits - 1)) - 1) as f64;
                        orig.iter().fold(0.0_f64, |m, v| m.max(v.abs())) / q_max
                    } else {
                        let min = orig.iter().fold(f64::INFINITY, |m, &v| m.min(v));
                        let max = orig.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                        (max - min) / ((1u32 << bits) - 1) as f64
                    };
                    for (a, b) in orig.iter().zip(quant) {
                        assert!(
                            (a - b).abs() <= scale / 2.0 + 1e-12,
                            "group {g}: |{a} - {b}| > {}",
                            scale / 2.0
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn rtn_rejects_bad_config() {
        let w = Matrix::zeros(2, 2);
        assert!(rtn_quantize(
            &w,
            &RtnConfig {
                bits: 1,
                ..RtnConfig::default()
            }
        )
        .is_err());
        assert!(rtn_quantize(
            &w,
            &RtnConfig {
                group_size: 0,
                ..RtnConfig::default()
            }
        )
        .is_err());
    }

    #[test]
    fn plain_vq_is_definitionally_the_quantizer() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let w = Matrix::from_fn(8, 8, |_, _| rng.gen_range(-1.0..1.0));
        let cfg = VqConfig::default();
        let a = plain_vq_quantize(&w, &cfg).unwrap();
        let b = vq::quantize_matrix(&w, &cfg).unwrap();
        assert_eq!(a.indices, b.indices);
        assert_eq!(a.codebook.words(), b.codebook.words());
        assert_eq!(a.pad_count, b.pad_count);
    }
}
