//! End-to-end driver: calibrate, split, quantize, correct, bundle, evaluate.
//!
//! [`run_pipeline`] processes one expert group against one calibration batch.
//! [`quantize_layer`] handles a whole simulated layer, including the gated-MLP
//! mode where the down projection is calibrated on the hidden activations the
//! quantized gate/up projections actually produce. [`evaluate`] reconstructs
//! the quantized layer from a bundle at serialized precision and compares
//! full-precision and quantized forward passes.
//!
//! Work parallelizes across experts; every reduction is order-preserving, so
//! the thread count never changes an output byte.

use crate::bcos::{
    collect_output_stats, fit_mmse_regression, fit_variance_match, BiasCorrection, CorrectionMethod,
};
use crate::bundle::{f16_bits_to_f64, f64_to_f16_bits, GroupBundle, Provenance, QuantizedBundle};
use crate::error::{Error, Result};
use crate::idre::{
    build_klt_basis, extract_shared, project_and_stack, redundancy_ratio, ExpertGroup, KltBasis,
};
use crate::moesim::{
    drift_report, forward, synth_layer, DriftReport, Expert, ExpertCorrection, MoeLayerSpec,
    SynthConfig,
};
use crate::numerics::Matrix;
use crate::report::{report_from_sections, CompressionReport};
use crate::vq::{assign_all, partition_subvectors, quantize_matrix, Codebook, VqConfig};
use rayon::prelude::*;

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    /// Shared-subspace rank as a fraction of the group input dimension;
    /// the rank itself is `floor(ic * k_ratio)`, so small groups with a tiny
    /// ratio get no shared part at all.
    pub k_ratio: f64,
    pub vq: VqConfig,
    pub bcos_method: CorrectionMethod,
    /// Relative floor for the coherence-basis inverse.
    pub eps_rel: f64,
    pub idre_on: bool,
    pub bcos_on: bool,
    pub klt_on: bool,
    /// Fit corrections on the tokens the router actually sends to each
    /// expert instead of the whole calibration batch. Only meaningful in
    /// [`quantize_layer`], where the router is available; experts that see
    /// fewer than two routed tokens fall back to the full batch.
    pub routed_stats: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            k_ratio: 1.0 / 128.0,
            vq: VqConfig::default(),
            bcos_method: CorrectionMethod::VarianceMatch,
            eps_rel: 1e-8,
            idre_on: true,
            bcos_on: true,
            klt_on: true,
            routed_stats: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.k_ratio) {
            return Err(Error::Config(format!(
                "k_ratio {} outside [0, 1]",
                self.k_ratio
            )));
        }
        if self.eps_rel < 0.0 {
            return Err(Error::Config("eps_rel must be non-negative".into()));
        }
        self.vq.validate()
    }
}

/// Shared rank from the ratio: `floor(ic * k_ratio)`, clamped to `[0, ic]`.
/// Zero means "no shared extraction".
pub fn k_from_ratio(ic: usize, k_ratio: f64) -> usize {
    ((ic as f64 * k_ratio + 1e-9).floor() as usize).min(ic)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent deterministic seed stream per (group, expert).
fn expert_seed(base: u64, group_salt: u64, expert: usize) -> u64 {
    splitmix64(
        base ^ group_salt.rotate_left(17) ^ (expert as u64).wrapping_mul(0xA24B_AED4_963E_E407),
    )
}

fn group_salt(role_label: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in role_label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

fn to_f16_vec(m: &Matrix) -> Vec<u16> {
    m.data().iter().map(|&v| f64_to_f16_bits(v)).collect()
}

fn f16_matrix(bits: &[u16], rows: usize, cols: usize) -> Result<Matrix> {
    Matrix::from_vec(
        rows,
        cols,
        bits.iter().map(|&b| f16_bits_to_f64(b)).collect(),
    )
}

/// Quantized group before corrections: serialized-precision sections plus
/// the dequantized expert weights they reproduce.
struct CoreGroup {
    bundle: GroupBundle,
    w_hats: Vec<Matrix>,
}

/// Split, quantize, and pack one group. `x_klt` is whatever activation batch
/// feeds this group's inputs (layer input for single-layer groups, hidden
/// activations for a down projection).
fn quantize_group_core(
    cfg: &PipelineConfig,
    group: &ExpertGroup,
    x_klt: &Matrix,
) -> Result<CoreGroup> {
    let (n, oc, ic) = (group.n(), group.oc(), group.ic());
    let k_request = if cfg.idre_on {
        k_from_ratio(ic, cfg.k_ratio)
    } else {
        0
    };

    let (u_share_f16, v_private_f16, k, rho_k, shared_f16): (
        Vec<u16>,
        Vec<u16>,
        usize,
        f64,
        Vec<Matrix>,
    ) = if k_request > 0 {
        let basis = if cfg.klt_on {
            build_klt_basis(x_klt, cfg.eps_rel)?
        } else {
            KltBasis::identity(ic)
        };
        let stacked = project_and_stack(group, &basis)?;
        let decomp = extract_shared(&stacked, &basis, n, k_request)?;
        let rho = redundancy_ratio(&decomp.spectrum, decomp.k).unwrap_or(0.0);

        let u_share_f16 = to_f16_vec(&decomp.u_share);
        let u_share_rounded = f16_matrix(&u_share_f16, decomp.k, ic)?;
        let mut v_private_f16 = Vec::with_capacity(n * oc * decomp.k);
        let mut shared = Vec::with_capacity(n);
        for v in &decomp.v_private {
            let bits = to_f16_vec(v);
            let rounded = f16_matrix(&bits, oc, decomp.k)?;
            // The shared part the decoder will see; the residual below
            // absorbs the f16 rounding.
            shared.push(rounded.matmul(&u_share_rounded)?);
            v_private_f16.extend_from_slice(&bits);
        }
        (u_share_f16, v_private_f16, decomp.k, rho, shared)
    } else {
        let zeros = (0..n).map(|_| Matrix::zeros(oc, ic)).collect();
        (Vec::new(), Vec::new(), 0, 0.0, zeros)
    };

    let salt = group_salt(group.role_label());
    let per_expert: Vec<(Vec<u16>, Vec<u32>, Matrix)> = group
        .experts()
        .par_iter()
        .enumerate()
        .map(|(i, w)| -> Result<(Vec<u16>, Vec<u32>, Matrix)> {
            let specific = w.sub(&shared_f16[i])?;
            let vq_cfg = VqConfig {
                seed: expert_seed(cfg.vq.seed, salt, i),
                ..cfg.vq.clone()
            };
            let trained = quantize_matrix(&specific, &vq_cfg)?;
            // Store the codebook at f16 and re-assign against the stored
            // words so every persisted index is nearest in the artifact.
            let cb_f16: Vec<u16> = trained
                .codebook
                .words()
                .iter()
                .map(|&v| f64_to_f16_bits(v))
                .collect();
            let cb_rounded = Codebook::new(
                vq_cfg.d,
                cb_f16.iter().map(|&b| f16_bits_to_f64(b)).collect(),
            )?;
            let subs = partition_subvectors(&specific, vq_cfg.d)?;
            let indices = assign_all(&subs, &cb_rounded)?;

            let total = oc * ic;
            let mut flat = Vec::with_capacity(indices.len() * vq_cfg.d);
            for &q in &indices {
                flat.extend_from_slice(cb_rounded.word(q as usize));
            }
            flat.truncate(total);
            let w_hat = shared_f16[i].add(&Matrix::from_vec(oc, ic, flat)?)?;
            Ok((cb_f16, indices, w_hat))
        })
        .collect::<Result<_>>()?;

    let mut codebooks_f16 = Vec::new();
    let mut indices = Vec::new();
    let mut w_hats = Vec::new();
    for (cb, idx, w_hat) in per_expert {
        codebooks_f16.extend_from_slice(&cb);
        indices.extend_from_slice(&idx);
        w_hats.push(w_hat);
    }

    let per = (oc * ic).div_ceil(cfg.vq.d);
    let bundle = GroupBundle {
        role_label: group.role_label().to_string(),
        n,
        oc,
        ic,
        k,
        pad_count: (per * cfg.vq.d - oc * ic) as u32,
        u_share_f16,
        v_private_f16,
        codebooks_f16,
        indices,
        s: vec![0.0; n * oc],
        b: vec![0.0; n * oc],
        rho_k,
    };
    Ok(CoreGroup { bundle, w_hats })
}

fn fit_correction(cfg: &PipelineConfig, y: &Matrix, y_hat: &Matrix) -> Result<BiasCorrection> {
    let (sy, syh) = collect_output_stats(y, y_hat)?;
    match cfg.bcos_method {
        CorrectionMethod::VarianceMatch => fit_variance_match(&sy, &syh),
        CorrectionMethod::MmseRegression => fit_mmse_regression(&sy, &syh),
    }
}

/// One boolean per (expert, token): shared experts see every token, routed
/// experts only the tokens the router selects them for.
fn routing_masks(layer: &MoeLayerSpec, x: &Matrix) -> Result<Vec<Vec<bool>>> {
    let b = x.rows();
    let mut masks = vec![vec![true; b]; layer.m()];
    let mut routed = vec![vec![false; b]; layer.n()];
    for t in 0..b {
        let (_, selected) = crate::moesim::gate(layer, x.row(t))?;
        for j in selected {
            routed[j][t] = true;
        }
    }
    masks.extend(routed);
    Ok(masks)
}

/// Rows of `m` where the mask is set, or None when fewer than two survive
/// (too few for statistics; the caller falls back to the full batch).
fn rows_where(m: &Matrix, mask: &[bool]) -> Option<Matrix> {
    let count = mask.iter().filter(|&&v| v).count();
    if count < 2 {
        return None;
    }
    let mut out = Matrix::zeros(count, m.cols());
    let mut dst = 0;
    for (t, &keep) in mask.iter().enumerate() {
        if keep {
            for j in 0..m.cols() {
                out.set(dst, j, m.get(t, j));
            }
            dst += 1;
        }
    }
    Some(out)
}

/// Paired streams restricted to one expert's fitting tokens.
fn fit_rows(full: &Matrix, full_hat: &Matrix, mask: Option<&[bool]>) -> (Matrix, Matrix) {
    if let Some(mk) = mask {
        if let (Some(a), Some(b)) = (rows_where(full, mk), rows_where(full_hat, mk)) {
            return (a, b);
        }
    }
    (full.clone(), full_hat.clone())
}

/// Write per-expert corrections into the group's f32 slots.
fn store_corrections(group: &mut GroupBundle, corrections: &[BiasCorrection]) {
    for (i, c) in corrections.iter().enumerate() {
        for j in 0..group.oc {
            group.s[i * group.oc + j] = c.s[j] as f32;
            group.b[i * group.oc + j] = c.b[j] as f32;
        }
    }
}

fn provenance_for(cfg: &PipelineConfig, synth: Option<&SynthConfig>) -> Provenance {
    Provenance {
        k_ratio: cfg.k_ratio,
        vq_d: cfg.vq.d as u32,
        vq_bits: cfg.vq.bits_per_weight,
        vq_iters: cfg.vq.iters as u32,
        seed: cfg.vq.seed,
        eps_rel: cfg.eps_rel,
        idre_on: cfg.idre_on,
        bcos_on: cfg.bcos_on,
        klt_on: cfg.klt_on,
        routed_stats: cfg.routed_stats,
        bcos_method: cfg.bcos_method,
        synth: synth.cloned(),
        config_hash: 0,
    }
    .finalize_hash()
}

/// Quantize one expert group against a calibration batch.
///
/// Corrections are fitted on `x_calib` pushed through the original and
/// dequantized weights, at the precision the bundle actually stores.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    group: &ExpertGroup,
    x_calib: &Matrix,
) -> Result<QuantizedBundle> {
    cfg.validate()?;
    if x_calib.cols() != group.ic() {
        return Err(Error::Shape(format!(
            "calibration width {} vs group ic {}",
            x_calib.cols(),
            group.ic()
        )));
    }
    let mut core = quantize_group_core(cfg, group, x_calib)?;
    if cfg.bcos_on {
        let corrections: Vec<BiasCorrection> = group
            .experts()
            .par_iter()
            .zip(&core.w_hats)
            .map(|(w, w_hat)| {
                let y = x_calib.matmul(&w.transpose())?;
                let y_hat = x_calib.matmul(&w_hat.transpose())?;
                fit_correction(cfg, &y, &y_hat)
            })
            .collect::<Result<_>>()?;
        store_corrections(&mut core.bundle, &corrections);
    }
    Ok(QuantizedBundle {
        provenance: provenance_for(cfg, None),
        groups: vec![core.bundle],
    })
}

/// Quantize every weight group of a layer.
///
/// Linear experts form one group (shared experts join the routed ones). MLP
/// experts form gate/up/down groups; the down projection is calibrated on
/// the hidden activations produced by the already-quantized, already-
/// corrected gate and up projections, mirroring what the decoder computes.
pub fn quantize_layer(
    cfg: &PipelineConfig,
    layer: &MoeLayerSpec,
    x_calib: &Matrix,
    synth: Option<&SynthConfig>,
) -> Result<QuantizedBundle> {
    cfg.validate()?;
    layer.validate()?;
    let groups = layer.weight_groups()?;
    let provenance = provenance_for(cfg, synth);

    let masks: Option<Vec<Vec<bool>>> = if cfg.bcos_on && cfg.routed_stats {
        Some(routing_masks(layer, x_calib)?)
    } else {
        None
    };
    let mask_of = |i: usize| masks.as_ref().map(|m| m[i].as_slice());

    if groups.len() == 1 {
        let group = &groups[0];
        let mut core = quantize_group_core(cfg, group, x_calib)?;
        if cfg.bcos_on {
            let corrections: Vec<BiasCorrection> = (0..group.n())
                .map(|i| {
                    let y = x_calib.matmul(&group.expert(i).transpose())?;
                    let y_hat = x_calib.matmul(&core.w_hats[i].transpose())?;
                    let (y_fit, y_hat_fit) = fit_rows(&y, &y_hat, mask_of(i));
                    fit_correction(cfg, &y_fit, &y_hat_fit)
                })
                .collect::<Result<_>>()?;
            store_corrections(&mut core.bundle, &corrections);
        }
        return Ok(QuantizedBundle {
            provenance,
            groups: vec![core.bundle],
        });
    }

    // Gated-MLP path: gate, up, down in that order.
    let (gate_group, up_group, down_group) = (&groups[0], &groups[1], &groups[2]);
    let mut gate_core = quantize_group_core(cfg, gate_group, x_calib)?;
    let mut up_core = quantize_group_core(cfg, up_group, x_calib)?;

    let n_all = gate_group.n();
    let mut gate_corr = Vec::with_capacity(n_all);
    let mut up_corr = Vec::with_capacity(n_all);
    let mut h_fp_all = Vec::with_capacity(n_all);
    let mut h_q_all = Vec::with_capacity(n_all);
    for i in 0..n_all {
        let g_fp = x_calib.matmul(&gate_group.expert(i).transpose())?;
        let u_fp = x_calib.matmul(&up_group.expert(i).transpose())?;
        let g_q = x_calib.matmul(&gate_core.w_hats[i].transpose())?;
        let u_q = x_calib.matmul(&up_core.w_hats[i].transpose())?;

        let (cg, cu) = if cfg.bcos_on {
            let (gf, gq) = fit_rows(&g_fp, &g_q, mask_of(i));
            let (uf, uq) = fit_rows(&u_fp, &u_q, mask_of(i));
            (
                fit_correction(cfg, &gf, &gq)?,
                fit_correction(cfg, &uf, &uq)?,
            )
        } else {
            (
                BiasCorrection::identity(g_fp.cols()),
                BiasCorrection::identity(u_fp.cols()),
            )
        };
        // Hidden states for every token: corrections apply unconditionally
        // at inference, whatever subset they were fitted on.
        let g_q_corr = crate::bcos::apply_correction(&g_q, &cg)?;
        let u_q_corr = crate::bcos::apply_correction(&u_q, &cu)?;
        h_fp_all.push(gated_hidden(&g_fp, &u_fp));
        h_q_all.push(gated_hidden(&g_q_corr, &u_q_corr));
        gate_corr.push(cg);
        up_corr.push(cu);
    }
    store_corrections(&mut gate_core.bundle, &gate_corr);
    store_corrections(&mut up_core.bundle, &up_corr);

    // Pool all experts' quantized-path hidden activations for the down
    // group's coherence basis.
    let refs: Vec<&Matrix> = h_q_all.iter().collect();
    let pooled_h = Matrix::vstack(&refs)?;
    let mut down_core = quantize_group_core(cfg, down_group, &pooled_h)?;
    if cfg.bcos_on {
        let down_corr: Vec<BiasCorrection> = (0..n_all)
            .map(|i| {
                let y = h_fp_all[i].matmul(&down_group.expert(i).transpose())?;
                let y_hat = h_q_all[i].matmul(&down_core.w_hats[i].transpose())?;
                let (y_fit, y_hat_fit) = fit_rows(&y, &y_hat, mask_of(i));
                fit_correction(cfg, &y_fit, &y_hat_fit)
            })
            .collect::<Result<_>>()?;
        store_corrections(&mut down_core.bundle, &down_corr);
    }

    Ok(QuantizedBundle {
        provenance,
        groups: vec![gate_core.bundle, up_core.bundle, down_core.bundle],
    })
}

fn gated_hidden(gate_out: &Matrix, up_out: &Matrix) -> Matrix {
    Matrix::from_fn(gate_out.rows(), gate_out.cols(), |t, j| {
        let g = gate_out.get(t, j);
        (g / (1.0 + (-g).exp())) * up_out.get(t, j)
    })
}

/// Rebuild the dequantized experts and their corrections from a bundle.
pub fn reconstruct_layer(
    bundle: &QuantizedBundle,
    layer: &MoeLayerSpec,
) -> Result<(MoeLayerSpec, Vec<ExpertCorrection>)> {
    let d = bundle.provenance.vq_d as usize;
    let method = bundle.provenance.bcos_method;
    let n_all = layer.m() + layer.n();
    for g in &bundle.groups {
        if g.n != n_all {
            return Err(Error::Integrity(format!(
                "bundle group '{}' has {} experts, layer has {n_all}",
                g.role_label, g.n
            )));
        }
    }

    let (experts, corrections) = match (bundle.groups.len(), &layer.routing_experts[0]) {
        (1, Expert::Linear(w0)) => {
            let g = &bundle.groups[0];
            if g.oc != w0.rows() || g.ic != w0.cols() {
                return Err(Error::Integrity(format!(
                    "bundle shape {}x{} vs layer {}x{}",
                    g.oc,
                    g.ic,
                    w0.rows(),
                    w0.cols()
                )));
            }
            let mut experts = Vec::with_capacity(n_all);
            let mut corrections = Vec::with_capacity(n_all);
            for i in 0..n_all {
                experts.push(Expert::Linear(g.reconstruct_expert(i, d)?));
                corrections.push(ExpertCorrection::Linear(g.correction(i, method)));
            }
            (experts, corrections)
        }
        (3, Expert::Mlp { .. }) => {
            let (gg, gu, gd) = (&bundle.groups[0], &bundle.groups[1], &bundle.groups[2]);
            let mut experts = Vec::with_capacity(n_all);
            let mut corrections = Vec::with_capacity(n_all);
            for i in 0..n_all {
                experts.push(Expert::Mlp {
                    gate: gg.reconstruct_expert(i, d)?,
                    up: gu.reconstruct_expert(i, d)?,
                    down: gd.reconstruct_expert(i, d)?,
                });
                corrections.push(ExpertCorrection::Mlp {
                    gate: gg.correction(i, method),
                    up: gu.correction(i, method),
                    down: gd.correction(i, method),
                });
            }
            (experts, corrections)
        }
        (got, _) => {
            return Err(Error::Integrity(format!(
                "bundle has {got} groups, which does not match the layer kind"
            )))
        }
    };
    Ok((layer.with_experts(experts)?, corrections))
}

/// Compare full-precision and quantized forward passes on an evaluation
/// batch, plus the measured storage accounting of the bundle.
pub fn evaluate(
    bundle: &QuantizedBundle,
    layer: &MoeLayerSpec,
    x_eval: &Matrix,
) -> Result<(DriftReport, CompressionReport)> {
    let (q_layer, corrections) = reconstruct_layer(bundle, layer)?;
    let fp_out = forward(layer, x_eval, None)?;
    let q_out = forward(&q_layer, x_eval, Some(&corrections))?;
    let drift = drift_report(&fp_out, &q_out, None)?;

    let bytes = bundle.serialize();
    let (_, measured) = QuantizedBundle::deserialize_measuring(&bytes)?;
    let compression = report_from_sections(&measured)?;
    Ok((drift, compression))
}

pub fn save_bundle(bundle: &QuantizedBundle, path: &std::path::Path) -> Result<()> {
    bundle.save(path)
}

pub fn load_bundle(path: &std::path::Path) -> Result<QuantizedBundle> {
    QuantizedBundle::load(path)
}

/// Convenience wrapper for synthetic experiments: generate, quantize,
/// evaluate on the held-out batch.
pub fn run_synth_pipeline(
    synth: &SynthConfig,
    cfg: &PipelineConfig,
) -> Result<(QuantizedBundle, DriftReport, CompressionReport)> {
    let (layer, x_calib, x_eval) = synth_layer(synth)?;
    let bundle = quantize_layer(cfg, &layer, &x_calib, Some(synth))?;
    let (drift, compression) = evaluate(&bundle, &layer, &x_eval)?;
    Ok((bundle, drift, compression))
}

/// The four ablation arms over the two pipeline stages.
pub fn ablation_arms(base: &PipelineConfig) -> Vec<(String, PipelineConfig)> {
    let mut arms = Vec::new();
    for (name, idre_on, bcos_on) in [
        ("none", false, false),
        ("bcos-only", false, true),
        ("idre-only", true, false),
        ("full", true, true),
    ] {
        arms.push((
            name.to_string(),
            PipelineConfig {
                idre_on,
                bcos_on,
                ..base.clone()
            },
        ));
    }
    arms
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::plain_vq_quantize;
    use crate::vq;

    fn small_synth() -> SynthConfig {
        SynthConfig {
            d_model: 16,
            oc: 8,
            n: 4,
            top_k: 2,
            shared_rank: 2,
            batch: 32,
            ..SynthConfig::default()
        }
    }

    fn small_cfg() -> PipelineConfig {
        PipelineConfig {
            k_ratio: 1.0 / 8.0, // floor(16/8) = 2
            vq: VqConfig {
                d: 2,
                bits_per_weight: 2,
                iters: 25,
                seed: 42,
            },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn k_from_ratio_semantics() {
        assert_eq!(k_from_ratio(128, 1.0 / 128.0), 1);
        assert_eq!(k_from_ratio(128, 1.0 / 256.0), 0);
        assert_eq!(k_from_ratio(128, 1.0 / 64.0), 2);
        assert_eq!(k_from_ratio(2048, 1.0 / 128.0), 16);
        assert_eq!(k_from_ratio(8, 1.0), 8);
        assert_eq!(k_from_ratio(8, 0.0), 0);
    }

    #[test]
    fn disabled_stages_degrade_to_plain_vq() {
        let (layer, x_calib, _) = synth_layer(&small_synth()).unwrap();
        let cfg = PipelineConfig {
            idre_on: false,
            bcos_on: false,
            ..small_cfg()
        };
        let group = &layer.weight_groups().unwrap()[0];
        let bundle = run_pipeline(&cfg, group, &x_calib).unwrap();
        let g = &bundle.groups[0];
        assert_eq!(g.k, 0);
        assert!(g.u_share_f16.is_empty());
        assert!(g.s.iter().all(|&v| v == 0.0));
        assert!(g.b.iter().all(|&v| v == 0.0));

        // Indices coincide with the plain VQ baseline quantized at the same
        // per-expert seed stream (modulo the f16 codebook re-assignment).
        let salt = group_salt(group.role_label());
        for i in 0..group.n() {
            let vq_cfg = VqConfig {
                seed: expert_seed(cfg.vq.seed, salt, i),
                ..cfg.vq.clone()
            };
            let baseline = plain_vq_quantize(group.expert(i), &vq_cfg).unwrap();
            let cb_rounded = Codebook::new(
                vq_cfg.d,
                baseline
                    .codebook
                    .words()
                    .iter()
                    .map(|&v| f16_bits_to_f64(f64_to_f16_bits(v)))
                    .collect(),
            )
            .unwrap();
            let subs = partition_subvectors(group.expert(i), vq_cfg.d).unwrap();
            let expect = assign_all(&subs, &cb_rounded).unwrap();
            assert_eq!(g.expert_indices(i, cfg.vq.d), &expect[..]);
        }
    }

    #[test]
    fn bcos_toggle_never_touches_codebooks_or_indices() {
        let (layer, x_calib, _) = synth_layer(&small_synth()).unwrap();
        let group = &layer.weight_groups().unwrap()[0];
        let with = run_pipeline(&small_cfg(), group, &x_calib).unwrap();
        let without = run_pipeline(
            &PipelineConfig {
                bcos_on: false,
                ..small_cfg()
            },
            group,
            &x_calib,
        )
        .unwrap();
        assert_eq!(with.groups[0].indices, without.groups[0].indices);
        assert_eq!(
            with.groups[0].codebooks_f16,
            without.groups[0].codebooks_f16
        );
        assert_eq!(with.groups[0].u_share_f16, without.groups[0].u_share_f16);
        assert!(without.groups[0].s.iter().all(|&v| v == 0.0));
        assert!(with.groups[0].s.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn pipeline_is_deterministic() {
        let (layer, x_calib, _) = synth_layer(&small_synth()).unwrap();
        let group = &layer.weight_groups().unwrap()[0];
        let a = run_pipeline(&small_cfg(), group, &x_calib).unwrap();
        let b = run_pipeline(&small_cfg(), group, &x_calib).unwrap();
        assert_eq!(a.serialize(), b.serialize());
    }

    #[test]
    fn zero_noise_full_rank_gives_tiny_residual() {
        // With identical experts and enough shared rank, the exact split
        // leaves a zero residual; the serialized bundle then sits at the
        // binary16 floor of its stored factors regardless of the bit width.
        let synth = SynthConfig {
            noise_scale: 0.0,
            ..small_synth()
        };
        let (layer, x_calib, _) = synth_layer(&synth).unwrap();
        let group = &layer.weight_groups().unwrap()[0];
        for bits in [1u32, 2, 3] {
            let cfg = PipelineConfig {
                k_ratio: 0.25, // k = 4 >= shared_rank = 2
                vq: VqConfig {
                    bits_per_weight: bits,
                    ..small_cfg().vq
                },
                ..small_cfg()
            };
            let bundle = run_pipeline(&cfg, group, &x_calib).unwrap();
            let floor = 1e-3 * group.expert(0).max_abs().max(1.0);
            for i in 0..group.n() {
                let w_hat = bundle.groups[0].reconstruct_expert(i, cfg.vq.d).unwrap();
                let err = w_hat.sub(group.expert(i)).unwrap().max_abs();
                assert!(err <= floor, "b={bits} expert {i} residual {err}");
            }
        }
    }

    #[test]
    fn routed_stats_fit_on_selected_tokens() {
        // seed 42's default router starves at least one expert, so the
        // full-batch fallback is exercised alongside the restricted fits.
        let synth = SynthConfig::default();
        let (layer, x_calib, x_eval) = synth_layer(&synth).unwrap();
        let all_tokens =
            quantize_layer(&PipelineConfig::default(), &layer, &x_calib, None).unwrap();
        let routed = quantize_layer(
            &PipelineConfig {
                routed_stats: true,
                ..PipelineConfig::default()
            },
            &layer,
            &x_calib,
            None,
        )
        .unwrap();

        // Quantization is untouched; only the corrections move.
        assert_eq!(all_tokens.groups[0].indices, routed.groups[0].indices);
        assert_ne!(all_tokens.groups[0].s, routed.groups[0].s);
        assert!(routed.provenance.routed_stats);

        // Still a working bundle with a sane error level.
        let (drift_all, _) = evaluate(&all_tokens, &layer, &x_eval).unwrap();
        let (drift_routed, _) = evaluate(&routed, &layer, &x_eval).unwrap();
        assert!(drift_routed.output_mse.is_finite());
        assert!(drift_routed.output_mse < 10.0 * drift_all.output_mse);
    }

    #[test]
    fn quantization_error_is_localized_to_the_specific_part() {
        // The end-to-end error of a reconstructed expert equals the
        // quantization error of its specific component; the shared part
        // passes through untouched.
        let (layer, x_calib, _) = synth_layer(&small_synth()).unwrap();
        let group = &layer.weight_groups().unwrap()[0];
        let cfg = small_cfg();
        let bundle = run_pipeline(&cfg, group, &x_calib).unwrap();
        let g = &bundle.groups[0];
        for i in 0..g.n {
            let shared = g.shared_matrix(i).unwrap();
            let specific = group.expert(i).sub(&shared).unwrap();
            let w_hat = g.reconstruct_expert(i, cfg.vq.d).unwrap();
            let total_err = w_hat.sub(group.expert(i)).unwrap();
            let specific_err = w_hat.sub(&shared).unwrap().sub(&specific).unwrap();
            let gap = total_err.sub(&specific_err).unwrap().max_abs();
            assert!(gap <= 1e-12, "expert {i}: error not localized ({gap})");
        }
    }

    #[test]
    fn evaluate_roundtrip_smoke() {
        let synth = small_synth();
        let (bundle, drift, compression) = run_synth_pipeline(&synth, &small_cfg()).unwrap();
        assert!(drift.output_mse.is_finite());
        assert!(compression.total_bits > 0.0);
        assert_eq!(bundle.groups.len(), 1);
        assert!(bundle.provenance.synth.is_some());
    }

    #[test]
    fn evaluate_rejects_mismatched_layer() {
        let (bundle, _, _) = run_synth_pipeline(&small_synth(), &small_cfg()).unwrap();
        let other = synth_layer(&SynthConfig {
            oc: 10,
            ..small_synth()
        })
        .unwrap()
        .0;
        let x = synth_layer(&small_synth()).unwrap().2;
        assert!(matches!(
            evaluate(&bundle, &other, &x),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn mlp_mode_quantizes_three_groups() {
        let synth = SynthConfig {
            mlp_hidden: Some(6),
            ..small_synth()
        };
        let (layer, x_calib, x_eval) = synth_layer(&synth).unwrap();
        let bundle = quantize_layer(&small_cfg(), &layer, &x_calib, Some(&synth)).unwrap();
        assert_eq!(bundle.groups.len(), 3);
        assert_eq!(bundle.groups[0].role_label, "gate");
        assert_eq!(bundle.groups[2].role_label, "down");
        let (drift, _) = evaluate(&bundle, &layer, &x_eval).unwrap();
        assert!(drift.output_mse.is_finite());
    }

    #[test]
    fn quantize_reconstruct_assignment_stays_nearest() {
        // Bundle-level indices are nearest w.r.t. the f16 codebook.
        let (layer, x_calib, _) = synth_layer(&small_synth()).unwrap();
        let group = &layer.weight_groups().unwrap()[0];
        let cfg = small_cfg();
        let bundle = run_pipeline(&cfg, group, &x_calib).unwrap();
        let g = &bundle.groups[0];
        for i in 0..g.n {
            let shared = g.shared_matrix(i).unwrap();
            let specific = group.expert(i).sub(&shared).unwrap();
            let subs = partition_subvectors(&specific, cfg.vq.d).unwrap();
            let cb = g.codebook(i, cfg.vq.d).unwrap();
            for t in 0..subs.count() {
                let oracle = vq::assign(subs.vec(t), &cb).unwrap();
                assert_eq!(g.expert_indices(i, cfg.vq.d)[t], oracle);
            }
        }
    }
}
