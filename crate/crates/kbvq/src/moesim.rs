//! Synthetic mixture-of-experts layer for end-to-end verification.
//!
//! The generator builds routing (and optionally always-active shared)
//! experts as `W_i = S + N_i`: a common low-rank component `S` whose input
//! directions sit in the top eigendirections of the activation covariance,
//! plus per-expert noise scaled to a fraction of `‖S‖_F`. Activations are
//! drawn with a power-law covariance spectrum. That reproduces, at desk
//! scale, the structure the compression pipeline exploits: experts that
//! overlap strongly along high-input-energy directions.
//!
//! Experts default to single linear maps so a scalar per-token loop can
//! oracle the forward pass; a gated two-layer MLP mode (`silu(Wg x) ⊙ (Wu x)`
//! then a down projection) is available behind the config for added realism.

use crate::bcos::{apply_correction_row, BiasCorrection};
use crate::error::{Error, Result};
use crate::idre::ExpertGroup;
use crate::numerics::{sym_eig, Matrix};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

/// One expert: a single linear map or a gated MLP.
#[derive(Debug, Clone)]
pub enum Expert {
    Linear(Matrix),
    Mlp {
        gate: Matrix,
        up: Matrix,
        down: Matrix,
    },
}

impl Expert {
    pub fn out_dim(&self) -> usize {
        match self {
            Expert::Linear(w) => w.rows(),
            Expert::Mlp { down, .. } => down.rows(),
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Expert::Linear(w) => w.cols(),
            Expert::Mlp { gate, .. } => gate.cols(),
        }
    }
}

/// Correction slots for one expert, one per linear layer.
#[derive(Debug, Clone)]
pub enum ExpertCorrection {
    Linear(BiasCorrection),
    Mlp {
        gate: BiasCorrection,
        up: BiasCorrection,
        down: BiasCorrection,
    },
}

/// A complete MoE layer: `m` always-active shared experts, `n` routed
/// experts behind softmax top-k gating.
#[derive(Debug, Clone)]
pub struct MoeLayerSpec {
    pub shared_experts: Vec<Expert>,
    pub routing_experts: Vec<Expert>,
    pub top_k: usize,
    /// n x d_model router weights.
    pub gate_weights: Matrix,
    /// Renormalize the selected gate scores to sum to one. Off by default:
    /// the selected softmax scores are used as-is.
    pub renormalize: bool,
    pub seed: u64,
}

impl MoeLayerSpec {
    pub fn m(&self) -> usize {
        self.shared_experts.len()
    }

    pub fn n(&self) -> usize {
        self.routing_experts.len()
    }

    pub fn d_model(&self) -> usize {
        self.gate_weights.cols()
    }

    pub fn oc(&self) -> usize {
        self.routing_experts[0].out_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.routing_experts.is_empty() {
            return Err(Error::Config(
                "layer needs at least one routing expert".into(),
            ));
        }
        if self.top_k < 1 || self.top_k > self.n() {
            return Err(Error::Config(format!(
                "top_k = {} out of range [1, {}]",
                self.top_k,
                self.n()
            )));
        }
        if self.gate_weights.rows() != self.n() {
            return Err(Error::Shape(format!(
                "router has {} rows for {} experts",
                self.gate_weights.rows(),
                self.n()
            )));
        }
        let (oc, ic) = (self.oc(), self.d_model());
        for e in self.shared_experts.iter().chain(&self.routing_experts) {
            if e.out_dim() != oc || e.in_dim() != ic {
                return Err(Error::Shape("inconsistent expert shapes".into()));
            }
        }
        Ok(())
    }

    /// All experts in quantization order: shared first, then routing.
    pub fn all_experts(&self) -> impl Iterator<Item = &Expert> {
        self.shared_experts.iter().chain(&self.routing_experts)
    }

    /// Replace every expert's weights (same order as [`Self::all_experts`]),
    /// keeping the router untouched.
    pub fn with_experts(&self, experts: Vec<Expert>) -> Result<MoeLayerSpec> {
        if experts.len() != self.m() + self.n() {
            return Err(Error::Shape(format!(
                "{} replacement experts for {}",
                experts.len(),
                self.m() + self.n()
            )));
        }
        let mut replaced = self.clone();
        let m = self.m();
        replaced.shared_experts = experts[..m].to_vec();
        replaced.routing_experts = experts[m..].to_vec();
        replaced.validate()?;
        Ok(replaced)
    }

    /// Collect one weight-matrix group per role across all experts
    /// (shared experts join the routed ones; shapes already match).
    pub fn weight_groups(&self) -> Result<Vec<ExpertGroup>> {
        let all: Vec<&Expert> = self.all_experts().collect();
        match all[0] {
            Expert::Linear(_) => {
                let ws = all
                    .iter()
                    .map(|e| match e {
                        Expert::Linear(w) => Ok(w.clone()),
                        _ => Err(Error::Config("mixed expert kinds".into())),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(vec![ExpertGroup::new(ws, "linear")?])
            }
            Expert::Mlp { .. } => {
                let mut gates = Vec::new();
                let mut ups = Vec::new();
                let mut downs = Vec::new();
                for e in &all {
                    match e {
                        Expert::Mlp { gate, up, down } => {
                            gates.push(gate.clone());
                            ups.push(up.clone());
                            downs.push(down.clone());
                        }
                        _ => return Err(Error::Config("mixed expert kinds".into())),
                    }
                }
                Ok(vec![
                    ExpertGroup::new(gates, "gate")?,
                    ExpertGroup::new(ups, "up")?,
                    ExpertGroup::new(downs, "down")?,
                ])
            }
        }
    }
}

/// Synthetic layer generator configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub d_model: usize,
    pub oc: usize,
    /// Routing expert count.
    pub n: usize,
    /// Shared (always-active) expert count.
    pub m: usize,
    pub top_k: usize,
    /// Rank of the common component.
    pub shared_rank: usize,
    /// Per-expert noise Frobenius norm as a fraction of the common
    /// component's. With `shared_rank = 0` the noise gets unit norm instead.
    pub noise_scale: f64,
    /// Geometric decay of the common component's singular values; a fast
    /// decay makes the first extracted direction carry most of the overlap.
    pub shared_decay: f64,
    /// Power-law exponent of the activation covariance eigenvalues
    /// (`λ_j ∝ j^-alpha`).
    pub spectrum_alpha: f64,
    /// Norm of the fixed activation mean vector. Zero-mean tokens are
    /// unrealistic: the channel-wise bias a quantizer introduces rides on
    /// the token-unconditional mean, which is what the output correction
    /// targets.
    pub mean_scale: f64,
    /// Calibration/eval batch size.
    pub batch: usize,
    pub seed: u64,
    /// Build gated-MLP experts with this hidden width instead of single
    /// linear maps.
    pub mlp_hidden: Option<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            d_model: 128,
            oc: 64,
            n: 8,
            m: 0,
            top_k: 2,
            shared_rank: 4,
            noise_scale: 0.2,
            shared_decay: 0.2,
            spectrum_alpha: 1.5,
            mean_scale: 3.0,
            batch: 256,
            seed: 42,
            mlp_hidden: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.oc == 0 || self.n == 0 || self.batch < 2 {
            return Err(Error::Config("zero-sized synthetic layer".into()));
        }
        if self.top_k < 1 || self.top_k > self.n {
            return Err(Error::Config(format!(
                "top_k = {} out of range [1, {}]",
                self.top_k, self.n
            )));
        }
        if self.shared_rank > self.oc.min(self.d_model) {
            return Err(Error::Config(format!(
                "shared_rank {} exceeds min(oc, d_model) = {}",
                self.shared_rank,
                self.oc.min(self.d_model)
            )));
        }
        if self.noise_scale < 0.0 {
            return Err(Error::Config("noise_scale must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-channel drift between a full-precision and a quantized output stream.
#[derive(Debug, Clone)]
pub struct DriftReport {
    /// `|μ_ŷ - μ_y|` per channel.
    pub mean_shift: Vec<f64>,
    /// `σ_ŷ² / σ_y²` per channel; zero-variance reference channels report
    /// [`VAR_RATIO_SENTINEL`] instead of NaN.
    pub var_ratio: Vec<f64>,
    pub output_mse: f64,
    /// Mean over expert pairs of per-token output cosine similarity, when
    /// per-expert outputs were supplied.
    pub expert_cosine: Option<f64>,
}

/// Reported for channels whose reference variance is zero.
pub const VAR_RATIO_SENTINEL: f64 = -1.0;

impl DriftReport {
    pub fn mean_shift_median(&self) -> f64 {
        median(&self.mean_shift)
    }

    /// Median variance ratio over non-sentinel channels.
    pub fn var_ratio_median(&self) -> f64 {
        let valid: Vec<f64> = self
            .var_ratio
            .iter()
            .copied()
            .filter(|&v| v != VAR_RATIO_SENTINEL)
            .collect();
        median(&valid)
    }
}

fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Router scores and selection for a single token.
///
/// Scores are the softmax of the router logits (summing to one over all `n`
/// experts); `selected` holds the `top_k` indices, score-descending, ties
/// broken toward the lower index.
pub fn gate(layer: &MoeLayerSpec, x: &[f64]) -> Result<(Vec<f64>, Vec<usize>)> {
    if x.len() != layer.d_model() {
        return Err(Error::Shape(format!(
            "token of dim {} for d_model {}",
            x.len(),
            layer.d_model()
        )));
    }
    let n = layer.n();
    let mut logits = vec![0.0; n];
    for (i, logit) in logits.iter_mut().enumerate() {
        let row = layer.gate_weights.row(i);
        *logit = row.iter().zip(x).map(|(w, v)| w * v).sum();
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut scores: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = scores.iter().sum();
    for s in scores.iter_mut() {
        *s /= sum;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order.truncate(layer.top_k);
    Ok((scores, order))
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// One expert's output for one token.
fn expert_forward(expert: &Expert, x: &[f64]) -> Vec<f64> {
    match expert {
        Expert::Linear(w) => mat_vec(w, x),
        Expert::Mlp { gate, up, down } => {
            let g = mat_vec(gate, x);
            let u = mat_vec(up, x);
            let h: Vec<f64> = g.iter().zip(&u).map(|(&a, &b)| silu(a) * b).collect();
            mat_vec(down, &h)
        }
    }
}

/// Like [`expert_forward`] but applying the per-layer corrections after each
/// linear map.
fn expert_forward_corrected(
    expert: &Expert,
    x: &[f64],
    corr: &ExpertCorrection,
) -> Result<Vec<f64>> {
    match (expert, corr) {
        (Expert::Linear(w), ExpertCorrection::Linear(c)) => {
            let mut y = mat_vec(w, x);
            apply_correction_row(&mut y, c);
            Ok(y)
        }
        (
            Expert::Mlp { gate, up, down },
            ExpertCorrection::Mlp {
                gate: cg,
                up: cu,
                down: cd,
            },
        ) => {
            let mut g = mat_vec(gate, x);
            apply_correction_row(&mut g, cg);
            let mut u = mat_vec(up, x);
            apply_correction_row(&mut u, cu);
            let h: Vec<f64> = g.iter().zip(&u).map(|(&a, &b)| silu(a) * b).collect();
            let mut y = mat_vec(down, &h);
            apply_correction_row(&mut y, cd);
            Ok(y)
        }
        _ => Err(Error::Config(
            "correction kind does not match expert kind".into(),
        )),
    }
}

fn mat_vec(w: &Matrix, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; w.rows()];
    for (i, o) in out.iter_mut().enumerate() {
        *o = w.row(i).iter().zip(x).map(|(a, b)| a * b).sum();
    }
    out
}

/// Batched forward pass: shared experts always fire (unit weight), routed
/// experts are gated by their softmax scores. Corrections, when given, cover
/// every expert in shared-then-routing order.
pub fn forward(
    layer: &MoeLayerSpec,
    x: &Matrix,
    corrections: Option<&[ExpertCorrection]>,
) -> Result<Matrix> {
    layer.validate()?;
    if x.cols() != layer.d_model() {
        return Err(Error::Shape(format!(
            "input width {} vs d_model {}",
            x.cols(),
            layer.d_model()
        )));
    }
    if let Some(c) = corrections {
        if c.len() != layer.m() + layer.n() {
            return Err(Error::Shape(format!(
                "{} corrections for {} experts",
                c.len(),
                layer.m() + layer.n()
            )));
        }
    }
    let oc = layer.oc();
    let m = layer.m();
    let mut out = Matrix::zeros(x.rows(), oc);
    for t in 0..x.rows() {
        let token = x.row(t);
        let (scores, selected) = gate(layer, token)?;
        let renorm = if layer.renormalize {
            let s: f64 = selected.iter().map(|&j| scores[j]).sum();
            if s > 0.0 {
                1.0 / s
            } else {
                1.0
            }
        } else {
            1.0
        };
        let mut acc = vec![0.0; oc];
        for (i, expert) in layer.shared_experts.iter().enumerate() {
            let y = match corrections {
                Some(c) => expert_forward_corrected(expert, token, &c[i])?,
                None => expert_forward(expert, token),
            };
            for (a, v) in acc.iter_mut().zip(&y) {
                *a += v;
            }
        }
        for &j in &selected {
            let expert = &layer.routing_experts[j];
            let y = match corrections {
                Some(c) => expert_forward_corrected(expert, token, &c[m + j])?,
                None => expert_forward(expert, token),
            };
            let g = scores[j] * renorm;
            for (a, v) in acc.iter_mut().zip(&y) {
                *a += g * v;
            }
        }
        for (j, &v) in acc.iter().enumerate() {
            out.set(t, j, v);
        }
    }
    Ok(out)
}

/// Generate a synthetic layer plus calibration and evaluation activations.
///
/// Everything is a pure function of the config; the same seed reproduces the
/// layer and both activation batches bit-exactly.
pub fn synth_layer(cfg: &SynthConfig) -> Result<(MoeLayerSpec, Matrix, Matrix)> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let d = cfg.d_model;

    // Activation covariance: power-law eigenvalues in a random rotation.
    // The eigenvectors of a random symmetric matrix give a deterministic,
    // roughly uniform orthogonal basis.
    let lam: Vec<f64> = (1..=d)
        .map(|j| (j as f64).powf(-cfg.spectrum_alpha))
        .collect();
    let g = gaussian(&mut rng, d, d);
    let sym = g.add(&g.transpose()).unwrap().scale(0.5);
    let rotation = sym_eig(&sym)?.eigenvectors; // d x d orthogonal

    // Common component: rank-r, right factors sitting in the top input
    // eigendirections, singular values decaying geometrically.
    let r = cfg.shared_rank;
    let mut common = Matrix::zeros(cfg.oc, d);
    for c in 0..r {
        let strength = cfg.shared_decay.powi(c as i32);
        let mut left: Vec<f64> = (0..cfg.oc).map(|_| normal(&mut rng)).collect();
        let norm = left.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        for v in left.iter_mut() {
            *v /= norm;
        }
        for i in 0..cfg.oc {
            for j in 0..d {
                let add = strength * left[i] * rotation.get(j, c);
                let cur = common.get(i, j);
                common.set(i, j, cur + add);
            }
        }
    }
    let common_norm = common.frobenius_norm();
    let noise_target = if r > 0 {
        cfg.noise_scale * common_norm
    } else {
        1.0
    };

    let build_expert = |rng: &mut ChaCha20Rng| -> Matrix {
        let raw = gaussian(rng, cfg.oc, d);
        let raw_norm = raw.frobenius_norm().max(1e-300);
        common.add(&raw.scale(noise_target / raw_norm)).unwrap()
    };

    let make_experts =
        |rng: &mut ChaCha20Rng, count: usize, hidden: Option<usize>| -> Result<Vec<Expert>> {
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                match hidden {
                    None => out.push(Expert::Linear(build_expert(rng))),
                    Some(h) => {
                        // Hidden-layer matrices reuse the same shared+noise
                        // construction at their own shapes.
                        let gate =
                            structured(rng, h, d, &rotation, r, cfg.shared_decay, cfg.noise_scale);
                        let up =
                            structured(rng, h, d, &rotation, r, cfg.shared_decay, cfg.noise_scale);
                        let down = {
                            let raw = gaussian(rng, cfg.oc, h);
                            raw.scale(1.0 / (h as f64).sqrt())
                        };
                        out.push(Expert::Mlp { gate, up, down });
                    }
                }
            }
            Ok(out)
        };

    // Order matters for reproducibility: shared experts, routing experts,
    // router, calibration batch, eval batch.
    let shared_experts = make_experts(&mut rng, cfg.m, cfg.mlp_hidden)?;
    let routing_experts = make_experts(&mut rng, cfg.n, cfg.mlp_hidden)?;
    let gate_weights = gaussian(&mut rng, cfg.n, d).scale(1.0 / (d as f64).sqrt());

    // Fixed activation mean shared by both batches. It lives in the span of
    // the shared input directions, making the mean the dominant
    // input-energy direction the way channel means dominate real hidden
    // states; with no shared component it falls back to a random direction.
    let mean: Vec<f64> = {
        let mut raw = vec![0.0; d];
        if r > 0 {
            for c in 0..r.min(d) {
                let w = normal(&mut rng);
                for j in 0..d {
                    raw[j] += w * rotation.get(j, c);
                }
            }
        } else {
            for v in raw.iter_mut() {
                *v = normal(&mut rng);
            }
        }
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        raw.iter()
            .map(|v| v * cfg.mean_scale / norm)
            .collect::<Vec<f64>>()
    };
    let sqrt_lam: Vec<f64> = lam.iter().map(|l| l.sqrt()).collect();
    let draw_batch = |rng: &mut ChaCha20Rng| -> Matrix {
        let g = gaussian(rng, cfg.batch, d);
        // x = mean + g * diag(sqrt(lam)) * rotationᵀ
        let mut scaled = g;
        for t in 0..cfg.batch {
            for j in 0..d {
                let v = scaled.get(t, j) * sqrt_lam[j];
                scaled.set(t, j, v);
            }
        }
        let mut x = scaled.matmul(&rotation.transpose()).unwrap();
        for t in 0..cfg.batch {
            for j in 0..d {
                let v = x.get(t, j) + mean[j];
                x.set(t, j, v);
            }
        }
        x
    };
    let x_calib = draw_batch(&mut rng);
    let x_eval = draw_batch(&mut rng);

    let layer = MoeLayerSpec {
        shared_experts,
        routing_experts,
        top_k: cfg.top_k,
        gate_weights,
        renormalize: false,
        seed: cfg.seed,
    };
    layer.validate()?;
    Ok((layer, x_calib, x_eval))
}

/// Shared+noise construction for an arbitrary shape (used by the MLP mode).
fn structured(
    rng: &mut ChaCha20Rng,
    rows: usize,
    cols: usize,
    rotation: &Matrix,
    rank: usize,
    decay: f64,
    noise_scale: f64,
) -> Matrix {
    let rank = rank.min(rows.min(cols));
    let mut common = Matrix::zeros(rows, cols);
    for c in 0..rank {
        let strength = decay.powi(c as i32);
        let mut left: Vec<f64> = (0..rows).map(|_| normal(rng)).collect();
        let norm = left.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        for v in left.iter_mut() {
            *v /= norm;
        }
        for i in 0..rows {
            for j in 0..cols {
                let add = strength * left[i] * rotation.get(j, c);
                let cur = common.get(i, j);
                common.set(i, j, cur + add);
            }
        }
    }
    let target = if rank > 0 {
        noise_scale * common.frobenius_norm()
    } else {
        1.0
    };
    let raw = gaussian(rng, rows, cols);
    let raw_norm = raw.frobenius_norm().max(1e-300);
    common.add(&raw.scale(target / raw_norm)).unwrap()
}

fn normal(rng: &mut ChaCha20Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn gaussian(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| normal(rng))
}

/// Compare a quantized output stream against its full-precision reference.
/// `expert_outputs`, when given, holds one B x oc output matrix per expert
/// and feeds the pairwise cosine-similarity figure.
pub fn drift_report(
    fp_out: &Matrix,
    q_out: &Matrix,
    expert_outputs: Option<&[Matrix]>,
) -> Result<DriftReport> {
    if fp_out.rows() != q_out.rows() || fp_out.cols() != q_out.cols() {
        return Err(Error::Shape(format!(
            "streams {}x{} vs {}x{}",
            fp_out.rows(),
            fp_out.cols(),
            q_out.rows(),
            q_out.cols()
        )));
    }
    let b = fp_out.rows();
    let oc = fp_out.cols();
    let inv = 1.0 / b as f64;

    let mut mean_shift = Vec::with_capacity(oc);
    let mut var_ratio = Vec::with_capacity(oc);
    for j in 0..oc {
        let mut mu_fp = 0.0;
        let mut mu_q = 0.0;
        for t in 0..b {
            mu_fp += fp_out.get(t, j);
            mu_q += q_out.get(t, j);
        }
        mu_fp *= inv;
        mu_q *= inv;
        let mut var_fp = 0.0;
        let mut var_q = 0.0;
        for t in 0..b {
            var_fp += (fp_out.get(t, j) - mu_fp).powi(2);
            var_q += (q_out.get(t, j) - mu_q).powi(2);
        }
        var_fp *= inv;
        var_q *= inv;
        mean_shift.push((mu_q - mu_fp).abs());
        if var_fp < 1e-300 {
            var_ratio.push(VAR_RATIO_SENTINEL);
        } else {
            var_ratio.push(var_q / var_fp);
        }
    }

    let diff = q_out.sub(fp_out)?;
    let output_mse = diff.sq_frobenius_norm() / (b * oc) as f64;

    let expert_cosine = match expert_outputs {
        None => None,
        Some(outs) => Some(mean_pairwise_cosine(outs)?),
    };

    Ok(DriftReport {
        mean_shift,
        var_ratio,
        output_mse,
        expert_cosine,
    })
}

/// Mean over expert pairs and tokens of the cosine between per-token output
/// vectors. Zero-norm outputs contribute zero.
pub fn mean_pairwise_cosine(outputs: &[Matrix]) -> Result<f64> {
    if outputs.len() < 2 {
        return Err(Error::EmptyInput("need at least two expert output streams"));
    }
    let b = outputs[0].rows();
    if outputs
        .iter()
        .any(|o| o.rows() != b || o.cols() != outputs[0].cols())
    {
        return Err(Error::Shape("expert output shapes differ".into()));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..outputs.len() {
        for j in (i + 1)..outputs.len() {
            for t in 0..b {
                total += cosine(outputs[i].row(t), outputs[j].row(t));
            }
            pairs += b;
        }
    }
    Ok(total / pairs as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na <= 0.0 || nb <= 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn tiny_layer(n: usize, top_k: usize, seed: u64) -> MoeLayerSpec {
        let cfg = SynthConfig {
            d_model: 6,
            oc: 4,
            n,
            top_k,
            batch: 8,
            seed,
            ..SynthConfig::default()
        };
        synth_layer(&cfg).unwrap().0
    }

    #[test]
    fn gate_tie_prefers_lowest_index() {
        let mut layer = tiny_layer(2, 1, 1);
        // Identical router rows force equal logits.
        let row: Vec<f64> = layer.gate_weights.row(0).to_vec();
        for (j, v) in row.iter().enumerate() {
            layer.gate_weights.set(1, j, *v);
        }
        let x = vec![0.3, -0.2, 0.5, 0.0, 0.1, -0.4];
        let (scores, selected) = gate(&layer, &x).unwrap();
        assert!((scores[0] - 0.5).abs() < 1e-12);
        assert!((scores[1] - 0.5).abs() < 1e-12);
        assert_eq!(selected, vec![0]);
    }

    #[test]
    fn gate_dominant_logit_wins() {
        let mut layer = tiny_layer(3, 1, 2);
        for j in 0..6 {
            layer.gate_weights.set(2, j, 50.0);
        }
        let x = vec![1.0; 6];
        let (scores, selected) = gate(&layer, &x).unwrap();
        assert_eq!(selected, vec![2]);
        assert!(scores[2] > 0.999);
    }

    #[test]
    fn gate_matches_full_sort_oracle() {
        let layer = tiny_layer(8, 2, 3);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        for _ in 0..20 {
            let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (scores, selected) = gate(&layer, &x).unwrap();
            let mut order: Vec<usize> = (0..8).collect();
            order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            assert_eq!(selected, order[..2].to_vec());
            let sum: f64 = scores.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_single_expert_unit_gate() {
        let layer = tiny_layer(1, 1, 5);
        let x = synth_layer(&SynthConfig {
            d_model: 6,
            oc: 4,
            n: 1,
            top_k: 1,
            batch: 8,
            seed: 5,
            ..SynthConfig::default()
        })
        .unwrap()
        .1;
        let out = forward(&layer, &x, None).unwrap();
        // Softmax over one expert is exactly 1, so y = W x.
        let w = match &layer.routing_experts[0] {
            Expert::Linear(w) => w.clone(),
            _ => unreachable!(),
        };
        let oracle = x.matmul(&w.transpose()).unwrap();
        assert!(out.sub(&oracle).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn forward_identical_experts_sum_selected_gates() {
        let mut layer = tiny_layer(4, 2, 6);
        let w = match &layer.routing_experts[0] {
            Expert::Linear(w) => w.clone(),
            _ => unreachable!(),
        };
        for e in layer.routing_experts.iter_mut() {
            *e = Expert::Linear(w.clone());
        }
        let x = synth_layer(&SynthConfig {
            d_model: 6,
            oc: 4,
            n: 4,
            top_k: 2,
            batch: 8,
            seed: 6,
            ..SynthConfig::default()
        })
        .unwrap()
        .1;
        let out = forward(&layer, &x, None).unwrap();
        for t in 0..x.rows() {
            let (scores, selected) = gate(&layer, x.row(t)).unwrap();
            let gsum: f64 = selected.iter().map(|&j| scores[j]).sum();
            let y = x.row_block(t, 1).unwrap().matmul(&w.transpose()).unwrap();
            for j in 0..4 {
                assert!((out.get(t, j) - gsum * y.get(0, j)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn forward_matches_per_token_loop_oracle() {
        let cfg = SynthConfig {
            d_model: 8,
            oc: 5,
            n: 4,
            m: 1,
            top_k: 2,
            batch: 16,
            seed: 7,
            ..SynthConfig::default()
        };
        let (layer, x, _) = synth_layer(&cfg).unwrap();
        let out = forward(&layer, &x, None).unwrap();
        // Scalar oracle: explicit loops over tokens, experts, channels.
        for t in 0..16 {
            let token = x.row(t);
            let (scores, selected) = gate(&layer, token).unwrap();
            let mut acc = [0.0; 5];
            for e in &layer.shared_experts {
                let w = match e {
                    Expert::Linear(w) => w,
                    _ => unreachable!(),
                };
                for i in 0..5 {
                    let mut dot = 0.0;
                    for j in 0..8 {
                        dot += w.get(i, j) * token[j];
                    }
                    acc[i] += dot;
                }
            }
            for &jexp in &selected {
                let w = match &layer.routing_experts[jexp] {
                    Expert::Linear(w) => w,
                    _ => unreachable!(),
                };
                for i in 0..5 {
                    let mut dot = 0.0;
                    for j in 0..8 {
                        dot += w.get(i, j) * token[j];
                    }
                    acc[i] += scores[jexp] * dot;
                }
            }
            for i in 0..5 {
                assert!((out.get(t, i) - acc[i]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn mlp_forward_matches_scalar_oracle() {
        let cfg = SynthConfig {
            d_model: 6,
            oc: 4,
            n: 2,
            top_k: 1,
            batch: 8,
            seed: 8,
            mlp_hidden: Some(5),
            ..SynthConfig::default()
        };
        let (layer, x, _) = synth_layer(&cfg).unwrap();
        let out = forward(&layer, &x, None).unwrap();
        for t in 0..8 {
            let token = x.row(t);
            let (scores, selected) = gate(&layer, token).unwrap();
            let j = selected[0];
            let (wg, wu, wd) = match &layer.routing_experts[j] {
                Expert::Mlp { gate, up, down } => (gate, up, down),
                _ => unreachable!(),
            };
            let mut h = [0.0; 5];
            for r in 0..5 {
                let mut g = 0.0;
                let mut u = 0.0;
                for c in 0..6 {
                    g += wg.get(r, c) * token[c];
                    u += wu.get(r, c) * token[c];
                }
                h[r] = (g / (1.0 + (-g).exp())) * u;
            }
            for i in 0..4 {
                let mut y = 0.0;
                for r in 0..5 {
                    y += wd.get(i, r) * h[r];
                }
                assert!((out.get(t, i) - scores[j] * y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn synth_zero_noise_gives_identical_experts() {
        let cfg = SynthConfig {
            noise_scale: 0.0,
            ..SynthConfig::default()
        };
        let (layer, _, _) = synth_layer(&cfg).unwrap();
        let groups = layer.weight_groups().unwrap();
        let g = &groups[0];
        for i in 1..g.n() {
            let diff = g.expert(i).sub(g.expert(0)).unwrap().max_abs();
            assert!(diff < 1e-12, "experts differ by {diff}");
        }
        // Stacked matrix has exactly shared_rank nonzero singular values.
        let basis = crate::idre::KltBasis::identity(cfg.d_model);
        let stacked = crate::idre::project_and_stack(g, &basis).unwrap();
        let dec = crate::numerics::svd(&stacked).unwrap();
        let cutoff = dec.sigma[0] * 1e-9;
        let rank = dec.sigma.iter().filter(|&&s| s > cutoff).count();
        assert_eq!(rank, cfg.shared_rank);
    }

    #[test]
    fn synth_pure_noise_has_uncorrelated_outputs() {
        let cfg = SynthConfig {
            shared_rank: 0,
            oc: 64,
            ..SynthConfig::default()
        };
        for seed in 0..5 {
            let (layer, _, x_eval) = synth_layer(&SynthConfig {
                seed,
                ..cfg.clone()
            })
            .unwrap();
            let outs: Vec<Matrix> = layer
                .routing_experts
                .iter()
                .map(|e| match e {
                    Expert::Linear(w) => x_eval.matmul(&w.transpose()).unwrap(),
                    _ => unreachable!(),
                })
                .collect();
            let cos = mean_pairwise_cosine(&outs).unwrap();
            assert!(cos.abs() < 0.1, "seed {seed}: cosine {cos}");
        }
    }

    #[test]
    fn synth_default_concentrates_energy() {
        let (layer, x_calib, _) = synth_layer(&SynthConfig::default()).unwrap();
        let group = &layer.weight_groups().unwrap()[0];
        let basis = crate::idre::build_klt_basis(&x_calib, 1e-8).unwrap();
        let stacked = crate::idre::project_and_stack(group, &basis).unwrap();
        let dec = crate::numerics::svd(&stacked).unwrap();
        let spectrum: Vec<f64> = dec.sigma.iter().map(|s| s * s).collect();
        let rho =
            crate::idre::redundancy_ratio(&spectrum, SynthConfig::default().shared_rank).unwrap();
        assert!(rho >= 0.9, "rho = {rho}");
    }

    #[test]
    fn drift_report_cases() {
        let (_, _, x) = synth_layer(&SynthConfig {
            d_model: 4,
            oc: 3,
            n: 1,
            top_k: 1,
            batch: 8,
            seed: 9,
            shared_rank: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        let fp = x.col_block(3).unwrap();

        let same = drift_report(&fp, &fp, None).unwrap();
        assert!(same.mean_shift.iter().all(|&v| v == 0.0));
        assert!(same.var_ratio.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert_eq!(same.output_mse, 0.0);

        let shifted = Matrix::from_fn(fp.rows(), 3, |t, j| fp.get(t, j) + 1.0);
        let rep = drift_report(&fp, &shifted, None).unwrap();
        for j in 0..3 {
            assert!((rep.mean_shift[j] - 1.0).abs() < 1e-12);
            assert!((rep.var_ratio[j] - 1.0).abs() < 1e-12);
        }
        assert!((rep.output_mse - 1.0).abs() < 1e-12);

        // Random case: MSE against an explicit elementwise oracle.
        let other = Matrix::from_fn(fp.rows(), 3, |t, j| fp.get(t, j) * 0.5 + 0.1 * j as f64);
        let rep = drift_report(&fp, &other, None).unwrap();
        let mut acc = 0.0;
        for t in 0..fp.rows() {
            for j in 0..3 {
                acc += (other.get(t, j) - fp.get(t, j)).powi(2);
            }
        }
        assert!((rep.output_mse - acc / (fp.rows() * 3) as f64).abs() < 1e-12);

        // Zero-variance channel reports the sentinel.
        let flat = Matrix::zeros(8, 3);
        let rep = drift_report(&flat, &fp, None).unwrap();
        assert!(rep.var_ratio.iter().all(|&v| v == VAR_RATIO_SENTINEL));
    }

    #[test]
    fn shape_errors_are_reported() {
        let layer = tiny_layer(2, 1, 20);
        let short = vec![0.0; 3];
        assert!(matches!(gate(&layer, &short), Err(Error::Shape(_))));

        let x = Matrix::zeros(4, 5);
        assert!(forward(&layer, &x, None).is_err());

        let x = Matrix::zeros(4, 6);
        let wrong_len = vec![ExpertCorrection::Linear(
            crate::bcos::BiasCorrection::identity(4),
        )];
        assert!(forward(&layer, &x, Some(&wrong_len[..])).is_err());
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_layer(&SynthConfig::default()).unwrap();
        let b = synth_layer(&SynthConfig::default()).unwrap();
        assert_eq!(a.1.data(), b.1.data());
        assert_eq!(a.2.data(), b.2.data());
        let (ga, gb) = (a.0.weight_groups().unwrap(), b.0.weight_groups().unwrap());
        for (x, y) in ga[0].experts().iter().zip(gb[0].experts()) {
            assert_eq!(x.data(), y.data());
        }
    }
}
