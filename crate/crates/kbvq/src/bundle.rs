//! On-disk artifact format for quantized expert groups.
//!
//! Sectioned little-endian binary: an 8-byte magic `KBVQMOE1`, a version,
//! then framed sections (4-byte tag, u64 payload length, CRC-32C of the
//! payload, payload bytes). A `CONF` section echoes the pipeline config and
//! provenance, each group contributes `GSHP`/`USHR`/`VPRV`/`CDBK`/`INDX`/
//! `BCOS` sections, and a trailing `MANI` section repeats every (tag, length,
//! checksum) triple so the manifest covers the whole file.
//!
//! Shared factors and codewords are stored as IEEE-754 binary16, correction
//! vectors as f32, and codeword indices packed at `b*d` bits each. The
//! in-memory [`QuantizedBundle`] holds exactly the serialized precision, so
//! `load(save(x)) == x` and re-saving is byte-identical.

use crate::bcos::{BiasCorrection, CorrectionMethod};
use crate::error::{Error, Result};
use crate::moesim::SynthConfig;
use crate::numerics::Matrix;
use crate::report::MeasuredSections;
use crate::vq::{pack_indices, unpack_indices, Codebook};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"KBVQMOE1";
pub const BUNDLE_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// binary16 conversion

/// f32 -> binary16 bits, round-to-nearest-even.
pub fn f32_to_f16_bits(value: f32) -> u16 {
    let bits = value.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp = ((bits >> 23) & 0xFF) as i32;
    let frac = bits & 0x007F_FFFF;

    if exp == 0xFF {
        // Inf / NaN
        let payload = if frac != 0 { 0x0200 } else { 0 };
        return sign | 0x7C00 | payload;
    }
    let unbiased = exp - 127;
    if unbiased > 15 {
        return sign | 0x7C00; // overflow -> inf
    }
    if unbiased >= -14 {
        // Normal range: keep 10 fraction bits with round-to-nearest-even.
        let mut mant = frac >> 13;
        let rest = frac & 0x1FFF;
        if rest > 0x1000 || (rest == 0x1000 && (mant & 1) == 1) {
            mant += 1;
        }
        let mut e16 = (unbiased + 15) as u32;
        if mant == 0x400 {
            mant = 0;
            e16 += 1;
            if e16 >= 31 {
                return sign | 0x7C00;
            }
        }
        return sign | ((e16 as u16) << 10) | mant as u16;
    }
    if unbiased >= -25 {
        // Subnormal: shift the implicit leading one into the fraction. The
        // -25 case rounds between zero and the smallest subnormal.
        let full = frac | 0x0080_0000;
        let shift = (-unbiased - 14 + 13) as u32;
        let mant = full >> shift;
        let rest = full & ((1 << shift) - 1);
        let half = 1u32 << (shift - 1);
        let mut mant = mant;
        if rest > half || (rest == half && (mant & 1) == 1) {
            mant += 1;
        }
        return sign | mant as u16;
    }
    sign // underflow -> signed zero
}

/// binary16 bits -> f32 (exact).
pub fn f16_bits_to_f32(bits: u16) -> f32 {
    let sign = (bits as u32 & 0x8000) << 16;
    let exp = (bits >> 10) & 0x1F;
    let frac = bits as u32 & 0x03FF;
    let out = match exp {
        0 => {
            if frac == 0 {
                sign
            } else {
                // Subnormal: renormalize.
                let mut e = 127 - 15 + 1;
                let mut f = frac;
                while f & 0x0400 == 0 {
                    f <<= 1;
                    e -= 1;
                }
                sign | ((e as u32) << 23) | ((f & 0x03FF) << 13)
            }
        }
        0x1F => sign | 0x7F80_0000 | (frac << 13),
        _ => sign | ((exp as u32 + 127 - 15) << 23) | (frac << 13),
    };
    f32::from_bits(out)
}

pub fn f64_to_f16_bits(value: f64) -> u16 {
    f32_to_f16_bits(value as f32)
}

pub fn f16_bits_to_f64(bits: u16) -> f64 {
    f16_bits_to_f32(bits) as f64
}

// ---------------------------------------------------------------------------
// CRC-32C (Castagnoli, reflected 0x82F63B78)

const fn crc32c_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = i as u32;
        let mut j = 0;
        while j < 8 {
            crc = if crc & 1 == 1 {
                (crc >> 1) ^ 0x82F6_3B78
            } else {
                crc >> 1
            };
            j += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

static CRC_TABLE: [u32; 256] = crc32c_table();

pub fn crc32c(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = (crc >> 8) ^ CRC_TABLE[((crc ^ b as u32) & 0xFF) as usize];
    }
    !crc
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

// ---------------------------------------------------------------------------
// bundle model

/// Config echo and provenance stored inside the bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub k_ratio: f64,
    pub vq_d: u32,
    pub vq_bits: u32,
    pub vq_iters: u32,
    pub seed: u64,
    pub eps_rel: f64,
    pub idre_on: bool,
    pub bcos_on: bool,
    pub klt_on: bool,
    /// Corrections fitted on gate-routed tokens only.
    pub routed_stats: bool,
    pub bcos_method: CorrectionMethod,
    /// Present when the source was the synthetic generator, so evaluation
    /// can regenerate the exact layer and activation batches.
    pub synth: Option<SynthConfig>,
    /// FNV-1a over the serialized config fields; filled on save.
    pub config_hash: u64,
}

/// One quantized expert group, stored at serialized precision.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupBundle {
    pub role_label: String,
    pub n: usize,
    pub oc: usize,
    pub ic: usize,
    /// Shared-subspace rank actually used (0 = no shared part).
    pub k: usize,
    /// Zero-padded tail elements per expert (same for all experts).
    pub pad_count: u32,
    /// k x ic shared factor, binary16 bits.
    pub u_share_f16: Vec<u16>,
    /// n blocks of oc x k, binary16 bits.
    pub v_private_f16: Vec<u16>,
    /// n blocks of K x d codewords, binary16 bits.
    pub codebooks_f16: Vec<u16>,
    /// n blocks of ceil(oc*ic/d) codeword indices.
    pub indices: Vec<u32>,
    /// n blocks of oc scale entries.
    pub s: Vec<f32>,
    /// n blocks of oc bias entries.
    pub b: Vec<f32>,
    /// Fraction of stacked energy the shared subspace captured.
    pub rho_k: f64,
}

impl GroupBundle {
    pub fn subvectors_per_expert(&self, d: usize) -> usize {
        (self.oc * self.ic).div_ceil(d)
    }

    /// The shared reconstruction `v_private[i] * u_share` at serialized
    /// precision, as f64.
    pub fn shared_matrix(&self, i: usize) -> Result<Matrix> {
        if self.k == 0 {
            return Ok(Matrix::zeros(self.oc, self.ic));
        }
        let u_share = Matrix::from_vec(
            self.k,
            self.ic,
            self.u_share_f16
                .iter()
                .map(|&v| f16_bits_to_f64(v))
                .collect(),
        )?;
        let block = &self.v_private_f16[i * self.oc * self.k..(i + 1) * self.oc * self.k];
        let v = Matrix::from_vec(
            self.oc,
            self.k,
            block.iter().map(|&v| f16_bits_to_f64(v)).collect(),
        )?;
        v.matmul(&u_share)
    }

    pub fn codebook(&self, i: usize, d: usize) -> Result<Codebook> {
        let k_size = self.codebooks_f16.len() / self.n / d;
        let block = &self.codebooks_f16[i * k_size * d..(i + 1) * k_size * d];
        Codebook::new(d, block.iter().map(|&v| f16_bits_to_f64(v)).collect())
    }

    pub fn expert_indices(&self, i: usize, d: usize) -> &[u32] {
        let per = self.subvectors_per_expert(d);
        &self.indices[i * per..(i + 1) * per]
    }

    pub fn correction(&self, i: usize, method: CorrectionMethod) -> BiasCorrection {
        BiasCorrection {
            s: self.s[i * self.oc..(i + 1) * self.oc]
                .iter()
                .map(|&v| v as f64)
                .collect(),
            b: self.b[i * self.oc..(i + 1) * self.oc]
                .iter()
                .map(|&v| v as f64)
                .collect(),
            method,
        }
    }

    /// Full dequantized expert `shared + codewords`, at serialized precision.
    pub fn reconstruct_expert(&self, i: usize, d: usize) -> Result<Matrix> {
        let shared = self.shared_matrix(i)?;
        let cb = self.codebook(i, d)?;
        let idx = self.expert_indices(i, d);
        let total = self.oc * self.ic;
        let mut flat = Vec::with_capacity(idx.len() * d);
        for &q in idx {
            if q as usize >= cb.len() {
                return Err(Error::Integrity(format!(
                    "codeword index {q} out of range (K = {})",
                    cb.len()
                )));
            }
            flat.extend_from_slice(cb.word(q as usize));
        }
        flat.truncate(total);
        let specific = Matrix::from_vec(self.oc, self.ic, flat)?;
        shared.add(&specific)
    }

    fn validate(&self, d: usize, bits: u32) -> Result<()> {
        let per = self.subvectors_per_expert(d);
        let k_size = 1usize << (bits as usize * d);
        if self.u_share_f16.len() != self.k * self.ic {
            return Err(Error::Integrity("u_share length mismatch".into()));
        }
        if self.v_private_f16.len() != self.n * self.oc * self.k {
            return Err(Error::Integrity("v_private length mismatch".into()));
        }
        if self.codebooks_f16.len() != self.n * k_size * d {
            return Err(Error::Integrity("codebook length mismatch".into()));
        }
        if self.indices.len() != self.n * per {
            return Err(Error::Integrity("index count mismatch".into()));
        }
        if self.s.len() != self.n * self.oc || self.b.len() != self.n * self.oc {
            return Err(Error::Integrity("correction length mismatch".into()));
        }
        if let Some(bad) = self.indices.iter().find(|&&q| q as usize >= k_size) {
            return Err(Error::Integrity(format!(
                "codeword index {bad} out of range (K = {k_size})"
            )));
        }
        let expected_pad = (per * d - self.oc * self.ic) as u32;
        if self.pad_count != expected_pad {
            return Err(Error::Integrity(format!(
                "pad_count {} does not match shape (expected {expected_pad})",
                self.pad_count
            )));
        }
        Ok(())
    }
}

/// The complete serialized artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBundle {
    pub provenance: Provenance,
    pub groups: Vec<GroupBundle>,
}

impl QuantizedBundle {
    pub fn weight_count(&self) -> usize {
        self.groups.iter().map(|g| g.n * g.oc * g.ic).sum()
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut sections: Vec<([u8; 4], Vec<u8>)> = Vec::new();
        sections.push((*b"CONF", encode_conf(&self.provenance)));
        for g in &self.groups {
            sections.push((*b"GSHP", encode_gshp(g)));
            sections.push((
                *b"USHR",
                g.u_share_f16.iter().flat_map(|v| v.to_le_bytes()).collect(),
            ));
            sections.push((
                *b"VPRV",
                g.v_private_f16
                    .iter()
                    .flat_map(|v| v.to_le_bytes())
                    .collect(),
            ));
            sections.push((
                *b"CDBK",
                g.codebooks_f16
                    .iter()
                    .flat_map(|v| v.to_le_bytes())
                    .collect(),
            ));
            sections.push((*b"INDX", encode_indices(g, &self.provenance)));
            sections.push((*b"BCOS", encode_bcos(g)));
        }

        let mut manifest = Vec::new();
        let mut framed = Vec::new();
        for (tag, payload) in &sections {
            let crc = crc32c(payload);
            manifest.extend_from_slice(tag);
            manifest.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            manifest.extend_from_slice(&crc.to_le_bytes());
            framed.push((tag, payload, crc));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
        out.extend_from_slice(&((sections.len() + 1) as u32).to_le_bytes());
        for (tag, payload, crc) in framed {
            out.extend_from_slice(tag.as_slice());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&crc.to_le_bytes());
            out.extend_from_slice(payload);
        }
        out.extend_from_slice(b"MANI");
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&crc32c(&manifest).to_le_bytes());
        out.extend_from_slice(&manifest);
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<QuantizedBundle> {
        let (bundle, _) = Self::deserialize_measuring(bytes)?;
        Ok(bundle)
    }

    /// Parse and verify, also returning per-category byte counts for the
    /// storage accounting.
    pub fn deserialize_measuring(bytes: &[u8]) -> Result<(QuantizedBundle, MeasuredSections)> {
        let mut r = Reader::new(bytes);
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::Integrity("bad magic".into()));
        }
        let version = r.u32()?;
        if version != BUNDLE_VERSION {
            return Err(Error::Integrity(format!(
                "unsupported bundle version {version}"
            )));
        }
        let section_count = r.u32()? as usize;

        let mut sections: Vec<([u8; 4], &[u8], u32)> = Vec::with_capacity(section_count);
        for _ in 0..section_count {
            let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
            let len = r.u64()? as usize;
            let crc = r.u32()?;
            let payload = r.take(len)?;
            if crc32c(payload) != crc {
                return Err(Error::Integrity(format!(
                    "checksum mismatch in section {}",
                    String::from_utf8_lossy(&tag)
                )));
            }
            sections.push((tag, payload, crc));
        }
        if !r.is_empty() {
            return Err(Error::Integrity("trailing bytes after last section".into()));
        }
        let Some((mani_tag, mani_payload, _)) = sections.last() else {
            return Err(Error::Integrity("empty bundle".into()));
        };
        if mani_tag != b"MANI" {
            return Err(Error::Integrity("manifest section missing".into()));
        }
        // Cross-check the manifest against every section it covers.
        let body = &sections[..sections.len() - 1];
        if mani_payload.len() != body.len() * 16 {
            return Err(Error::Integrity("manifest entry count mismatch".into()));
        }
        for (i, (tag, payload, crc)) in body.iter().enumerate() {
            let e = &mani_payload[i * 16..(i + 1) * 16];
            let m_len = u64::from_le_bytes(e[4..12].try_into().unwrap()) as usize;
            let m_crc = u32::from_le_bytes(e[12..16].try_into().unwrap());
            if &e[..4] != tag || m_len != payload.len() || m_crc != *crc {
                return Err(Error::Integrity(format!(
                    "manifest disagrees with section {}",
                    String::from_utf8_lossy(tag)
                )));
            }
        }

        let mut iter = body.iter();
        let Some((tag, conf_payload, _)) = iter.next() else {
            return Err(Error::Integrity("missing CONF section".into()));
        };
        if tag != b"CONF" {
            return Err(Error::Integrity("first section must be CONF".into()));
        }
        let provenance = decode_conf(conf_payload)?;
        let d = provenance.vq_d as usize;
        let bits = provenance.vq_bits;

        let mut measured = MeasuredSections::default();
        let mut groups = Vec::new();
        let mut pending: Option<GroupBundle> = None;
        let mut expect: &[u8] = b"GSHP";
        for (tag, payload, _) in iter {
            if tag != expect {
                return Err(Error::Integrity(format!(
                    "expected {} section, found {}",
                    String::from_utf8_lossy(expect),
                    String::from_utf8_lossy(tag)
                )));
            }
            match tag {
                b"GSHP" => {
                    pending = Some(decode_gshp(payload)?);
                    expect = b"USHR";
                }
                b"USHR" => {
                    let g = pending.as_mut().unwrap();
                    g.u_share_f16 = decode_u16s(payload);
                    measured.shared_bytes += payload.len() as u64;
                    expect = b"VPRV";
                }
                b"VPRV" => {
                    let g = pending.as_mut().unwrap();
                    g.v_private_f16 = decode_u16s(payload);
                    measured.shared_bytes += payload.len() as u64;
                    expect = b"CDBK";
                }
                b"CDBK" => {
                    let g = pending.as_mut().unwrap();
                    g.codebooks_f16 = decode_u16s(payload);
                    measured.codebook_bytes += payload.len() as u64;
                    expect = b"INDX";
                }
                b"INDX" => {
                    let g = pending.as_mut().unwrap();
                    let per = g.subvectors_per_expert(d);
                    g.indices = unpack_indices(payload, bits * d as u32, g.n * per)?;
                    measured.index_bytes += payload.len() as u64;
                    expect = b"BCOS";
                }
                b"BCOS" => {
                    let g = pending.as_mut().unwrap();
                    let (s, b) = decode_bcos(payload, g.n, g.oc)?;
                    g.s = s;
                    g.b = b;
                    measured.bcos_bytes += payload.len() as u64;
                    let done = pending.take().unwrap();
                    done.validate(d, bits)?;
                    measured.weight_count += done.n * done.oc * done.ic;
                    groups.push(done);
                    expect = b"GSHP";
                }
                _ => return Err(Error::Integrity("unknown section".into())),
            }
        }
        if pending.is_some() {
            return Err(Error::Integrity("truncated group sections".into()));
        }
        if groups.is_empty() {
            return Err(Error::Integrity("bundle holds no groups".into()));
        }

        let payload_total = measured.shared_bytes
            + measured.index_bytes
            + measured.codebook_bytes
            + measured.bcos_bytes;
        measured.overhead_bytes = bytes.len() as u64 - payload_total;

        Ok((QuantizedBundle { provenance, groups }, measured))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.serialize())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<QuantizedBundle> {
        let bytes = std::fs::read(path)?;
        Self::deserialize(&bytes)
    }
}

// ---------------------------------------------------------------------------
// section codecs

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Integrity("unexpected end of bundle".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

impl Provenance {
    /// Hash of the serialized config fields. Stored in the CONF section and
    /// kept filled in memory so a bundle equals its reloaded self.
    pub fn computed_hash(&self) -> u64 {
        fnv1a64(&conf_body(self))
    }

    pub fn finalize_hash(mut self) -> Provenance {
        self.config_hash = self.computed_hash();
        self
    }
}

fn encode_conf(p: &Provenance) -> Vec<u8> {
    let mut out = conf_body(p);
    let hash = fnv1a64(&out);
    out.extend_from_slice(&hash.to_le_bytes());
    out
}

fn conf_body(p: &Provenance) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&p.k_ratio.to_le_bytes());
    out.extend_from_slice(&p.vq_d.to_le_bytes());
    out.extend_from_slice(&p.vq_bits.to_le_bytes());
    out.extend_from_slice(&p.vq_iters.to_le_bytes());
    out.extend_from_slice(&p.seed.to_le_bytes());
    out.extend_from_slice(&p.eps_rel.to_le_bytes());
    let flags = (p.idre_on as u8)
        | (p.bcos_on as u8) << 1
        | (p.klt_on as u8) << 2
        | (p.routed_stats as u8) << 3;
    out.push(flags);
    out.push(match p.bcos_method {
        CorrectionMethod::VarianceMatch => 0,
        CorrectionMethod::MmseRegression => 1,
    });
    match &p.synth {
        None => out.push(0),
        Some(s) => {
            out.push(1);
            for v in [
                s.d_model as u32,
                s.oc as u32,
                s.n as u32,
                s.m as u32,
                s.top_k as u32,
                s.shared_rank as u32,
                s.batch as u32,
                s.mlp_hidden.map(|h| h as u32).unwrap_or(0),
            ] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&s.noise_scale.to_le_bytes());
            out.extend_from_slice(&s.shared_decay.to_le_bytes());
            out.extend_from_slice(&s.spectrum_alpha.to_le_bytes());
            out.extend_from_slice(&s.mean_scale.to_le_bytes());
            out.extend_from_slice(&s.seed.to_le_bytes());
        }
    }
    out
}

fn decode_conf(payload: &[u8]) -> Result<Provenance> {
    if payload.len() < 8 {
        return Err(Error::Integrity("CONF section too short".into()));
    }
    let (body, hash_bytes) = payload.split_at(payload.len() - 8);
    let stored_hash = u64::from_le_bytes(hash_bytes.try_into().unwrap());
    if fnv1a64(body) != stored_hash {
        return Err(Error::Integrity("config hash mismatch".into()));
    }
    let mut r = Reader::new(body);
    let k_ratio = r.f64()?;
    let vq_d = r.u32()?;
    let vq_bits = r.u32()?;
    let vq_iters = r.u32()?;
    let seed = r.u64()?;
    let eps_rel = r.f64()?;
    let flags = r.u8()?;
    let method = match r.u8()? {
        0 => CorrectionMethod::VarianceMatch,
        1 => CorrectionMethod::MmseRegression,
        other => {
            return Err(Error::Integrity(format!(
                "unknown correction method tag {other}"
            )))
        }
    };
    let synth = match r.u8()? {
        0 => None,
        1 => {
            let d_model = r.u32()? as usize;
            let oc = r.u32()? as usize;
            let n = r.u32()? as usize;
            let m = r.u32()? as usize;
            let top_k = r.u32()? as usize;
            let shared_rank = r.u32()? as usize;
            let batch = r.u32()? as usize;
            let mlp_hidden = match r.u32()? as usize {
                0 => None,
                h => Some(h),
            };
            let noise_scale = r.f64()?;
            let shared_decay = r.f64()?;
            let spectrum_alpha = r.f64()?;
            let mean_scale = r.f64()?;
            let synth_seed = r.u64()?;
            Some(SynthConfig {
                d_model,
                oc,
                n,
                m,
                top_k,
                shared_rank,
                noise_scale,
                shared_decay,
                spectrum_alpha,
                mean_scale,
                batch,
                seed: synth_seed,
                mlp_hidden,
            })
        }
        other => {
            return Err(Error::Integrity(format!(
                "unknown synth presence tag {other}"
            )))
        }
    };
    if !r.is_empty() {
        return Err(Error::Integrity("trailing bytes in CONF".into()));
    }
    if vq_d == 0 || vq_bits == 0 || vq_bits as usize * vq_d as usize > 24 {
        return Err(Error::Integrity("CONF carries an invalid vq config".into()));
    }
    Ok(Provenance {
        k_ratio,
        vq_d,
        vq_bits,
        vq_iters,
        seed,
        eps_rel,
        idre_on: flags & 1 != 0,
        bcos_on: flags & 2 != 0,
        klt_on: flags & 4 != 0,
        routed_stats: flags & 8 != 0,
        bcos_method: method,
        synth,
        config_hash: stored_hash,
    })
}

fn encode_gshp(g: &GroupBundle) -> Vec<u8> {
    let mut out = Vec::new();
    let label = g.role_label.as_bytes();
    out.extend_from_slice(&(label.len() as u16).to_le_bytes());
    out.extend_from_slice(label);
    for v in [
        g.n as u32,
        g.oc as u32,
        g.ic as u32,
        g.k as u32,
        g.pad_count,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&g.rho_k.to_le_bytes());
    out
}

fn decode_gshp(payload: &[u8]) -> Result<GroupBundle> {
    let mut r = Reader::new(payload);
    let label_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
    let label = String::from_utf8(r.take(label_len)?.to_vec())
        .map_err(|_| Error::Integrity("role label is not utf-8".into()))?;
    let n = r.u32()? as usize;
    let oc = r.u32()? as usize;
    let ic = r.u32()? as usize;
    let k = r.u32()? as usize;
    let pad_count = r.u32()?;
    let rho_k = r.f64()?;
    if !r.is_empty() {
        return Err(Error::Integrity("trailing bytes in GSHP".into()));
    }
    if n == 0 || oc == 0 || ic == 0 {
        return Err(Error::Integrity("group with zero dimension".into()));
    }
    Ok(GroupBundle {
        role_label: label,
        n,
        oc,
        ic,
        k,
        pad_count,
        u_share_f16: Vec::new(),
        v_private_f16: Vec::new(),
        codebooks_f16: Vec::new(),
        indices: Vec::new(),
        s: Vec::new(),
        b: Vec::new(),
        rho_k,
    })
}

fn encode_indices(g: &GroupBundle, p: &Provenance) -> Vec<u8> {
    pack_indices(&g.indices, p.vq_bits * p.vq_d)
}

fn encode_bcos(g: &GroupBundle) -> Vec<u8> {
    let mut out = Vec::with_capacity((g.s.len() + g.b.len()) * 4);
    for i in 0..g.n {
        for &v in &g.s[i * g.oc..(i + 1) * g.oc] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &g.b[i * g.oc..(i + 1) * g.oc] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_bcos(payload: &[u8], n: usize, oc: usize) -> Result<(Vec<f32>, Vec<f32>)> {
    if payload.len() != n * oc * 8 {
        return Err(Error::Integrity("BCOS section length mismatch".into()));
    }
    let mut s = Vec::with_capacity(n * oc);
    let mut b = Vec::with_capacity(n * oc);
    let mut pos = 0;
    for _ in 0..n {
        for _ in 0..oc {
            s.push(f32::from_le_bytes(
                payload[pos..pos + 4].try_into().unwrap(),
            ));
            pos += 4;
        }
        for _ in 0..oc {
            b.push(f32::from_le_bytes(
                payload[pos..pos + 4].try_into().unwrap(),
            ));
            pos += 4;
        }
    }
    Ok((s, b))
}

fn decode_u16s(payload: &[u8]) -> Vec<u16> {
    payload
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crc32c_known_vector() {
        assert_eq!(crc32c(b"123456789"), 0xE306_9283);
        assert_eq!(crc32c(b""), 0);
    }

    #[test]
    fn f16_known_values() {
        assert_eq!(f32_to_f16_bits(0.0), 0x0000);
        assert_eq!(f32_to_f16_bits(-0.0), 0x8000);
        assert_eq!(f32_to_f16_bits(1.0), 0x3C00);
        assert_eq!(f32_to_f16_bits(-2.0), 0xC000);
        assert_eq!(f32_to_f16_bits(0.5), 0x3800);
        assert_eq!(f32_to_f16_bits(65504.0), 0x7BFF);
        assert_eq!(f32_to_f16_bits(1e9), 0x7C00); // overflow -> inf
        assert_eq!(f16_bits_to_f32(0x3C00), 1.0);
        assert_eq!(f16_bits_to_f32(0x3800), 0.5);
        assert_eq!(f16_bits_to_f32(0x0001), 5.960_464_5e-8); // smallest subnormal
                                                             // Rounding at the subnormal boundary: just above half the smallest
                                                             // subnormal rounds up to it, at or below rounds to (signed) zero.
        assert_eq!(f32_to_f16_bits(4.0e-8), 0x0001);
        assert_eq!(f32_to_f16_bits(2.980_232_2e-8), 0x0000); // exact tie -> even
        assert_eq!(f32_to_f16_bits(1.0e-8), 0x0000);
        assert_eq!(f32_to_f16_bits(-4.0e-8), 0x8001);
    }

    #[test]
    fn f16_roundtrip_is_stable() {
        // One narrowing pass is lossy; a second is the identity.
        for i in 0..2000 {
            let v = (i as f32 - 1000.0) * 0.37;
            let once = f16_bits_to_f32(f32_to_f16_bits(v));
            let twice = f16_bits_to_f32(f32_to_f16_bits(once));
            assert_eq!(once, twice, "v = {v}");
            assert!((v - once).abs() <= v.abs() * 1e-3 + 1e-7);
        }
        // Every f16 bit pattern survives the f32 detour (non-NaN ones exactly).
        for bits in 0..=0xFFFFu16 {
            let f = f16_bits_to_f32(bits);
            if f.is_nan() {
                continue;
            }
            assert_eq!(f32_to_f16_bits(f), bits, "bits = {bits:#06x}");
        }
    }

    fn sample_bundle() -> QuantizedBundle {
        let provenance = Provenance {
            k_ratio: 1.0 / 128.0,
            vq_d: 2,
            vq_bits: 2,
            vq_iters: 100,
            seed: 42,
            eps_rel: 1e-8,
            idre_on: true,
            bcos_on: true,
            klt_on: true,
            routed_stats: false,
            bcos_method: CorrectionMethod::VarianceMatch,
            synth: Some(SynthConfig::default()),
            config_hash: 0,
        };
        let n = 2usize;
        let (oc, ic, k) = (3usize, 4usize, 1usize);
        let k_size = 1usize << (2 * 2);
        let per = (oc * ic).div_ceil(2);
        let group = GroupBundle {
            role_label: "linear".into(),
            n,
            oc,
            ic,
            k,
            pad_count: 0,
            u_share_f16: (0..k * ic)
                .map(|i| f64_to_f16_bits(i as f64 * 0.1))
                .collect(),
            v_private_f16: (0..n * oc * k)
                .map(|i| f64_to_f16_bits(i as f64 * -0.2))
                .collect(),
            codebooks_f16: (0..n * k_size * 2)
                .map(|i| f64_to_f16_bits((i % 7) as f64 * 0.05))
                .collect(),
            indices: (0..n * per).map(|i| (i % k_size) as u32).collect(),
            s: vec![0.125; n * oc],
            b: vec![-0.5; n * oc],
            rho_k: 0.9,
        };
        QuantizedBundle {
            provenance: provenance.finalize_hash(),
            groups: vec![group],
        }
    }

    #[test]
    fn roundtrip_is_exact_and_resave_identical() {
        let bundle = sample_bundle();
        let bytes = bundle.serialize();
        let (back, measured) = QuantizedBundle::deserialize_measuring(&bytes).unwrap();
        assert_eq!(back, bundle);
        let again = back.serialize();
        assert_eq!(bytes, again, "re-save is not byte-identical");
        assert!(measured.weight_count == 2 * 3 * 4);
        assert!(measured.overhead_bytes > 0);
    }

    #[test]
    fn corruption_is_detected() {
        let bundle = sample_bundle();
        let bytes = bundle.serialize();

        // Flip one payload byte somewhere in the middle.
        let mut bad = bytes.clone();
        let mid = bytes.len() / 2;
        bad[mid] ^= 0xFF;
        assert!(matches!(
            QuantizedBundle::deserialize(&bad),
            Err(Error::Integrity(_))
        ));

        // Truncation.
        assert!(matches!(
            QuantizedBundle::deserialize(&bytes[..bytes.len() - 9]),
            Err(Error::Integrity(_))
        ));

        // Bad magic.
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            QuantizedBundle::deserialize(&bad),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bundle.kbvq");
        let bundle = sample_bundle();
        bundle.save(&path).unwrap();
        let back = QuantizedBundle::load(&path).unwrap();
        assert_eq!(back.groups, bundle.groups);
        // Saving the loaded bundle reproduces the file bytes.
        let again_path = dir.path().join("bundle2.kbvq");
        back.save(&again_path).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&again_path).unwrap()
        );
    }
}
