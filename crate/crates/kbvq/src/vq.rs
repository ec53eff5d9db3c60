//! Vector quantization of expert-specific residual matrices.
//!
//! A matrix is flattened row-major, split into length-d sub-vectors (the
//! ragged tail is zero-padded), and each sub-vector is mapped to the nearest
//! codeword of a k-means codebook trained on that same matrix. The codebook
//! size is tied to the advertised bit budget: `K = 2^(b*d)` so an index
//! costs exactly `b*d` bits and the payload lands at `b` bits per weight.
//!
//! All randomness flows through a seeded ChaCha stream; identical inputs and
//! configs give bit-identical codebooks, assignments, and packed bytes.

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Quantizer configuration. `bits_per_weight * d` may not exceed 24 so the
/// codebook stays addressable.
#[derive(Debug, Clone, PartialEq)]
pub struct VqConfig {
    /// Sub-vector length.
    pub d: usize,
    /// Advertised bits per weight; codebook size is `2^(b*d)`.
    pub bits_per_weight: u32,
    /// Maximum Lloyd iterations.
    pub iters: usize,
    pub seed: u64,
}

impl Default for VqConfig {
    fn default() -> Self {
        VqConfig {
            d: 4,
            bits_per_weight: 2,
            iters: 100,
            seed: 42,
        }
    }
}

impl VqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("sub-vector length d must be >= 1".into()));
        }
        if self.bits_per_weight == 0 {
            return Err(Error::Config("bits_per_weight must be >= 1".into()));
        }
        if self.iters == 0 {
            return Err(Error::Config("iters must be >= 1".into()));
        }
        if self.index_bits() > 24 {
            return Err(Error::Config(format!(
                "b*d = {} exceeds the 24-bit codebook guard",
                self.index_bits()
            )));
        }
        Ok(())
    }

    /// Bits per stored index.
    pub fn index_bits(&self) -> u32 {
        self.bits_per_weight * self.d as u32
    }

    /// Codebook size `K = 2^(b*d)`.
    pub fn codebook_size(&self) -> usize {
        1usize << self.index_bits()
    }
}

/// K codewords of length d. Trained in f64; serialization narrows to f16.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    d: usize,
    words: Vec<f64>,
}

impl Codebook {
    pub fn new(d: usize, words: Vec<f64>) -> Result<Self> {
        if d == 0 || words.is_empty() || words.len() % d != 0 {
            return Err(Error::Shape(format!(
                "codebook of {} values cannot hold length-{d} words",
                words.len()
            )));
        }
        if words.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("codeword entry".into()));
        }
        Ok(Codebook { d, words })
    }

    pub fn len(&self) -> usize {
        self.words.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn word(&self, i: usize) -> &[f64] {
        &self.words[i * self.d..(i + 1) * self.d]
    }

    pub fn words(&self) -> &[f64] {
        &self.words
    }
}

/// Sub-vector view of a flattened matrix: `count` contiguous chunks of
/// length `d`, the final one padded with `pad_count` zeros.
#[derive(Debug, Clone)]
pub struct SubVectors {
    d: usize,
    data: Vec<f64>,
    pad_count: usize,
}

impl SubVectors {
    pub fn count(&self) -> usize {
        self.data.len() / self.d
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn pad_count(&self) -> usize {
        self.pad_count
    }

    pub fn vec(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    /// Sub-vectors that enter codebook training: the zero-padded tail chunk
    /// is excluded unless it is the only chunk.
    fn training_range(&self) -> std::ops::Range<usize> {
        let n = self.count();
        if self.pad_count > 0 && n > 1 {
            0..n - 1
        } else {
            0..n
        }
    }
}

/// A vector-quantized matrix: codeword indices plus the codebook that
/// reconstructs it, with enough shape metadata to undo the padding.
#[derive(Debug, Clone)]
pub struct QuantizedTensor {
    pub oc: usize,
    pub ic: usize,
    pub d: usize,
    pub indices: Vec<u32>,
    pub codebook: Codebook,
    pub pad_count: usize,
}

/// Split a matrix into length-d sub-vectors over its row-major flattening.
pub fn partition_subvectors(w: &Matrix, d: usize) -> Result<SubVectors> {
    if d == 0 {
        return Err(Error::Config("sub-vector length d must be >= 1".into()));
    }
    let total = w.rows() * w.cols();
    let chunks = total.div_ceil(d);
    let padded = chunks * d;
    let mut data = Vec::with_capacity(padded);
    data.extend_from_slice(w.data());
    data.resize(padded, 0.0);
    Ok(SubVectors {
        d,
        data,
        pad_count: padded - total,
    })
}

#[inline]
fn dist2(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let diff = x - y;
        acc += diff * diff;
    }
    acc
}

/// k-means++ seeding over the training sub-vectors.
///
/// The first center is drawn uniformly; each later center is drawn with
/// probability proportional to its squared distance from the nearest center
/// so far. When fewer distinct vectors than centers exist, the surplus
/// centers are duplicates and get a deterministic 1e-9-scale perturbation so
/// Lloyd can still separate them.
pub fn kmeanspp_init(subs: &SubVectors, k: usize, seed: u64) -> Result<Codebook> {
    let range = subs.training_range();
    let n = range.end - range.start;
    if n == 0 {
        return Err(Error::EmptyInput("no sub-vectors to seed from"));
    }
    if k == 0 {
        return Err(Error::Config("codebook size must be >= 1".into()));
    }
    let d = subs.d();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let mut centers: Vec<f64> = Vec::with_capacity(k * d);
    let first = rng.gen_range(0..n);
    centers.extend_from_slice(subs.vec(first));

    let mut best: Vec<f64> = (0..n)
        .map(|i| dist2(subs.vec(i), subs.vec(first)))
        .collect();
    for _ in 1..k {
        let total: f64 = best.iter().sum();
        let chosen = if total > 0.0 {
            let r = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in best.iter().enumerate() {
                acc += w;
                if r < acc {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // Every vector coincides with a chosen center; fall back to a
            // uniform draw and rely on the perturbation below.
            rng.gen_range(0..n)
        };
        let start = centers.len();
        centers.extend_from_slice(subs.vec(chosen));
        let new = &centers[start..start + d];
        for i in 0..n {
            let nd = dist2(subs.vec(i), new);
            if nd < best[i] {
                best[i] = nd;
            }
        }
    }

    perturb_duplicates(&mut centers, d, data_scale(subs));
    Codebook::new(d, centers)
}

fn data_scale(subs: &SubVectors) -> f64 {
    subs.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Shift the r-th duplicate of any center by `r * 1e-9 * scale` so duplicate
/// centers become distinguishable without moving them meaningfully.
fn perturb_duplicates(centers: &mut [f64], d: usize, scale: f64) {
    if scale == 0.0 {
        return;
    }
    let k = centers.len() / d;
    for i in 1..k {
        let mut rank = 0usize;
        for j in 0..i {
            if centers[i * d..(i + 1) * d] == centers[j * d..(j + 1) * d] {
                rank += 1;
            }
        }
        if rank > 0 {
            for v in centers[i * d..(i + 1) * d].iter_mut() {
                *v += rank as f64 * 1e-9 * scale;
            }
        }
    }
}

/// Nearest codeword by squared distance, ties to the lowest index.
pub fn assign(z: &[f64], cb: &Codebook) -> Result<u32> {
    if z.len() != cb.d() {
        return Err(Error::Shape(format!(
            "sub-vector length {} vs codebook d {}",
            z.len(),
            cb.d()
        )));
    }
    let mut best = 0u32;
    let mut best_d = f64::INFINITY;
    for i in 0..cb.len() {
        let d = dist2(z, cb.word(i));
        if d < best_d {
            best_d = d;
            best = i as u32;
        }
    }
    Ok(best)
}

/// Lloyd iterations on the training sub-vectors: assign each vector to its
/// nearest center, recompute centers as cluster means, reseed empty clusters
/// to the current farthest point, stop when assignments repeat or `iters`
/// runs out. Returns the refined codebook and the inertia after each
/// assignment pass (non-increasing).
pub fn lloyd_train(
    subs: &SubVectors,
    init: &Codebook,
    iters: usize,
) -> Result<(Codebook, Vec<f64>)> {
    let range = subs.training_range();
    let n = range.end - range.start;
    if n == 0 {
        return Err(Error::EmptyInput("no sub-vectors to train on"));
    }
    let d = subs.d();
    if init.d() != d {
        return Err(Error::Shape(format!(
            "init codebook d {} vs sub-vector d {d}",
            init.d()
        )));
    }
    let k = init.len();
    let mut centers = init.words().to_vec();
    let mut prev: Option<Vec<u32>> = None;
    let mut trace = Vec::new();

    for _ in 0..iters {
        // Assignment pass.
        let mut assignments = Vec::with_capacity(n);
        let mut dists = Vec::with_capacity(n);
        let mut inertia = 0.0;
        for i in 0..n {
            let v = subs.vec(i);
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let dd = dist2(v, &centers[c * d..(c + 1) * d]);
                if dd < best_d {
                    best_d = dd;
                    best = c;
                }
            }
            assignments.push(best as u32);
            dists.push(best_d);
            inertia += best_d;
        }
        trace.push(inertia);
        if prev.as_deref() == Some(&assignments[..]) {
            break;
        }

        // Update pass: means in fixed vector order.
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignments[i] as usize;
            counts[c] += 1;
            for (dst, src) in sums[c * d..(c + 1) * d].iter_mut().zip(subs.vec(i)) {
                *dst += src;
            }
        }
        let mut claimed = dists.clone();
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for j in 0..d {
                    centers[c * d + j] = sums[c * d + j] * inv;
                }
            } else {
                // Reseed to the farthest point still available; each reseed
                // consumes its point so several empty clusters spread out.
                let mut far = 0usize;
                let mut far_d = -1.0;
                for (i, &dd) in claimed.iter().enumerate() {
                    if dd > far_d {
                        far_d = dd;
                        far = i;
                    }
                }
                centers[c * d..(c + 1) * d].copy_from_slice(subs.vec(far));
                claimed[far] = -1.0;
            }
        }
        prev = Some(assignments);
    }

    Ok((Codebook::new(d, centers)?, trace))
}

/// Full quantization of one matrix: partition, seed, train, assign.
pub fn quantize_matrix(w: &Matrix, cfg: &VqConfig) -> Result<QuantizedTensor> {
    cfg.validate()?;
    let subs = partition_subvectors(w, cfg.d)?;
    let init = kmeanspp_init(&subs, cfg.codebook_size(), cfg.seed)?;
    let (codebook, _trace) = lloyd_train(&subs, &init, cfg.iters)?;
    let indices = assign_all(&subs, &codebook)?;
    Ok(QuantizedTensor {
        oc: w.rows(),
        ic: w.cols(),
        d: cfg.d,
        indices,
        codebook,
        pad_count: subs.pad_count(),
    })
}

/// Assign every sub-vector (including the padded tail) to its codeword.
pub fn assign_all(subs: &SubVectors, cb: &Codebook) -> Result<Vec<u32>> {
    (0..subs.count()).map(|i| assign(subs.vec(i), cb)).collect()
}

/// Scatter codewords back into the original shape, stripping tail padding.
pub fn reconstruct(q: &QuantizedTensor) -> Result<Matrix> {
    let total = q.oc * q.ic;
    let expected_chunks = total.div_ceil(q.d);
    if q.indices.len() != expected_chunks {
        return Err(Error::Integrity(format!(
            "{} indices for {expected_chunks} sub-vectors",
            q.indices.len()
        )));
    }
    let k = q.codebook.len();
    let mut flat = Vec::with_capacity(expected_chunks * q.d);
    for &idx in &q.indices {
        if idx as usize >= k {
            return Err(Error::Integrity(format!(
                "codeword index {idx} out of range (K = {k})"
            )));
        }
        flat.extend_from_slice(q.codebook.word(idx as usize));
    }
    flat.truncate(total);
    Matrix::from_vec(q.oc, q.ic, flat)
}

/// Pack codeword indices at `bits` bits each, LSB-first within each byte.
pub fn pack_indices(indices: &[u32], bits: u32) -> Vec<u8> {
    assert!(bits >= 1 && bits <= 24);
    let total_bits = indices.len() * bits as usize;
    let mut out = vec![0u8; total_bits.div_ceil(8)];
    let mut cursor = 0usize;
    for &idx in indices {
        for b in 0..bits {
            if idx >> b & 1 == 1 {
                out[cursor >> 3] |= 1 << (cursor & 7);
            }
            cursor += 1;
        }
    }
    out
}

/// Inverse of [`pack_indices`].
pub fn unpack_indices(bytes: &[u8], bits: u32, count: usize) -> Result<Vec<u32>> {
    assert!(bits >= 1 && bits <= 24);
    let need_bits = count * bits as usize;
    if bytes.len() * 8 < need_bits {
        return Err(Error::Integrity(format!(
            "{} bytes cannot hold {count} indices of {bits} bits",
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(count);
    let mut cursor = 0usize;
    for _ in 0..count {
        let mut v = 0u32;
        for b in 0..bits {
            if bytes[cursor >> 3] >> (cursor & 7) & 1 == 1 {
                v |= 1 << b;
            }
            cursor += 1;
        }
        out.push(v);
    }
    Ok(out)
}
