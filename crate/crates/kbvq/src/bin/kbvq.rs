//! Command-line driver: quantize, eval, sweep-rank, ablate, report.
//!
//! Exit codes: 0 success, 2 config/usage error, 3 artifact integrity error,
//! 4 I/O error.

use clap::{Args, Parser, Subcommand};
use kbvq::bcos::CorrectionMethod;
use kbvq::bundle::QuantizedBundle;
use kbvq::error::Error;
use kbvq::idre::ExpertGroup;
use kbvq::moesim::{synth_layer, Expert, MoeLayerSpec, SynthConfig};
use kbvq::numerics::Matrix;
use kbvq::pipeline::{
    ablation_arms, evaluate, k_from_ratio, quantize_layer, run_pipeline, run_synth_pipeline,
    PipelineConfig,
};
use kbvq::report::{effective_bits, measure_actual, BitBudget};
use kbvq::tensor_file::{find_tensor, read_tensors};
use kbvq::vq::VqConfig;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "kbvq", version, about = "MoE weight-group compression toolkit")]
struct Cli {
    /// Worker threads (never changes any output byte).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Emit machine-readable JSON instead of key=value text.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quantize an expert group (synthetic by default) into a bundle.
    Quantize {
        #[command(flatten)]
        pipe: PipeArgs,
        #[command(flatten)]
        synth: SynthArgs,
        #[command(flatten)]
        files: FileSource,
        /// Output bundle path.
        #[arg(long, default_value = "bundle.kbvq")]
        out: PathBuf,
    },
    /// Evaluate a bundle: output drift plus measured storage accounting.
    Eval {
        /// Bundle produced by `quantize`.
        #[arg(long)]
        bundle: PathBuf,
        #[command(flatten)]
        files: FileSource,
        /// Router top-k when evaluating file-based experts.
        #[arg(long)]
        top_k: Option<usize>,
    },
    /// Sweep the shared-subspace rank ratio and report output MSE per step.
    SweepRank {
        #[command(flatten)]
        pipe: PipeArgs,
        #[command(flatten)]
        synth: SynthArgs,
        /// Comma-separated ratios, fractions allowed (e.g. 1/256,1/128,1/64).
        #[arg(long, default_value = "1/256,1/128,1/64")]
        k_ratios: String,
        /// Paired seeds per step (seed, seed+1, ...).
        #[arg(long, default_value_t = 1)]
        seeds: usize,
    },
    /// Run the stage-toggle ablation arms on the synthetic layer.
    Ablate {
        #[command(flatten)]
        pipe: PipeArgs,
        #[command(flatten)]
        synth: SynthArgs,
        /// Paired seeds per arm (seed, seed+1, ...).
        #[arg(long, default_value_t = 1)]
        seeds: usize,
    },
    /// Closed-form storage accounting for a configuration.
    Report {
        /// Expert output dimension.
        #[arg(long)]
        m: usize,
        /// Expert input dimension.
        #[arg(long)]
        l: usize,
        /// Expert count.
        #[arg(long, default_value_t = 64)]
        n_experts: usize,
        #[arg(long, default_value_t = 2)]
        bits: u32,
        #[arg(long, default_value_t = 4)]
        vq_d: usize,
        #[arg(long, default_value = "1/128")]
        k_ratio: String,
        #[arg(long)]
        no_bcos: bool,
        /// Measure an actual bundle file instead of the formula.
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct PipeArgs {
    /// Shared-subspace rank as a fraction of the input dimension; accepts
    /// fractions like 1/128.
    #[arg(long, default_value = "1/128")]
    k_ratio: String,
    /// Sub-vector length.
    #[arg(long, default_value_t = 4)]
    vq_d: usize,
    /// Bits per weight (codebook size is 2^(bits*vq_d)).
    #[arg(long, default_value_t = 2)]
    bits: u32,
    /// Lloyd iteration cap.
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Relative regularization floor for the coherence-basis inverse.
    #[arg(long, default_value_t = 1e-8)]
    eps_rel: f64,
    /// Correction fit: variance-match or mmse-regression.
    #[arg(long, default_value = "variance-match")]
    bcos_method: String,
    /// Skip the shared-subspace extraction stage.
    #[arg(long)]
    no_idre: bool,
    /// Skip the output-correction stage.
    #[arg(long)]
    no_bcos: bool,
    /// Replace the input-coherence basis with the identity.
    #[arg(long)]
    no_klt: bool,
    /// Fit corrections only on the tokens routed to each expert.
    #[arg(long)]
    routed_stats: bool,
}

impl PipeArgs {
    fn to_config(&self) -> Result<PipelineConfig, Error> {
        let method = match self.bcos_method.as_str() {
            "variance-match" => CorrectionMethod::VarianceMatch,
            "mmse-regression" => CorrectionMethod::MmseRegression,
            other => {
                return Err(Error::Config(format!(
                    "unknown bcos method '{other}' (variance-match | mmse-regression)"
                )))
            }
        };
        let cfg = PipelineConfig {
            k_ratio: parse_ratio(&self.k_ratio)?,
            vq: VqConfig {
                d: self.vq_d,
                bits_per_weight: self.bits,
                iters: self.iters,
                seed: self.seed,
            },
            bcos_method: method,
            eps_rel: self.eps_rel,
            idre_on: !self.no_idre,
            bcos_on: !self.no_bcos,
            klt_on: !self.no_klt,
            routed_stats: self.routed_stats,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Flag defaults mirror `SynthConfig::default()` so the CLI and library
/// agree on the reference layer.
#[derive(Args, Clone)]
struct SynthArgs {
    #[arg(long, default_value_t = SynthConfig::default().d_model)]
    d_model: usize,
    #[arg(long, default_value_t = SynthConfig::default().oc)]
    oc: usize,
    #[arg(long, default_value_t = SynthConfig::default().n)]
    n_experts: usize,
    /// Always-active shared experts.
    #[arg(long, default_value_t = SynthConfig::default().m)]
    m_shared: usize,
    #[arg(long, default_value_t = SynthConfig::default().top_k)]
    top_k: usize,
    #[arg(long, default_value_t = SynthConfig::default().shared_rank)]
    shared_rank: usize,
    #[arg(long, default_value_t = SynthConfig::default().noise_scale)]
    noise_scale: f64,
    #[arg(long, default_value_t = SynthConfig::default().shared_decay)]
    shared_decay: f64,
    /// Power-law exponent of the activation covariance spectrum.
    #[arg(long, default_value_t = SynthConfig::default().spectrum_alpha)]
    alpha: f64,
    /// Norm of the fixed activation mean vector.
    #[arg(long, default_value_t = SynthConfig::default().mean_scale)]
    mean_scale: f64,
    /// Calibration/eval batch size.
    #[arg(long, default_value_t = SynthConfig::default().batch)]
    batch: usize,
    /// Build gated-MLP experts with this hidden width.
    #[arg(long)]
    mlp_hidden: Option<usize>,
}

impl SynthArgs {
    fn to_config(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            d_model: self.d_model,
            oc: self.oc,
            n: self.n_experts,
            m: self.m_shared,
            top_k: self.top_k,
            shared_rank: self.shared_rank,
            noise_scale: self.noise_scale,
            shared_decay: self.shared_decay,
            spectrum_alpha: self.alpha,
            mean_scale: self.mean_scale,
            batch: self.batch,
            seed,
            mlp_hidden: self.mlp_hidden,
        }
    }
}

#[derive(Args, Clone)]
struct FileSource {
    /// Tensor file holding expert.0..expert.N-1 (and optionally gate).
    #[arg(long)]
    experts: Option<PathBuf>,
    /// Tensor file holding a `calib` activation matrix.
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Tensor file holding an `eval` activation matrix.
    #[arg(long)]
    eval: Option<PathBuf>,
}

fn parse_ratio(text: &str) -> Result<f64, Error> {
    let value = if let Some((num, den)) = text.split_once('/') {
        let n: f64 = num
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad ratio '{text}'")))?;
        let d: f64 = den
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad ratio '{text}'")))?;
        n / d
    } else {
        text.trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad ratio '{text}'")))?
    };
    if !value.is_finite() {
        return Err(Error::Config(format!("bad ratio '{text}'")));
    }
    Ok(value)
}

fn load_expert_group(path: &std::path::Path) -> Result<(ExpertGroup, Option<Matrix>), Error> {
    let tensors = read_tensors(path)?;
    let mut experts = Vec::new();
    for i in 0.. {
        match find_tensor(&tensors, &format!("expert.{i}")) {
            Some(m) => experts.push(m),
            None => break,
        }
    }
    if experts.is_empty() {
        return Err(Error::Config(format!(
            "{} holds no expert.N tensors",
            path.display()
        )));
    }
    let gate = find_tensor(&tensors, "gate");
    Ok((ExpertGroup::new(experts, "linear")?, gate))
}

fn load_activations(path: &std::path::Path, name: &str) -> Result<Matrix, Error> {
    let tensors = read_tensors(path)?;
    find_tensor(&tensors, name)
        .ok_or_else(|| Error::Config(format!("{} holds no '{name}' tensor", path.display())))
}

/// Layer wrapper for file-based experts. Without a gate tensor all experts
/// fire with uniform weight.
fn file_layer(
    group: &ExpertGroup,
    gate: Option<Matrix>,
    top_k: Option<usize>,
) -> Result<MoeLayerSpec, Error> {
    let n = group.n();
    let gate_weights = match gate {
        Some(g) => g,
        None => Matrix::zeros(n, group.ic()),
    };
    let layer = MoeLayerSpec {
        shared_experts: Vec::new(),
        routing_experts: group
            .experts()
            .iter()
            .map(|w| Expert::Linear(w.clone()))
            .collect(),
        top_k: top_k.unwrap_or(n),
        gate_weights,
        renormalize: false,
        seed: 0,
    };
    layer.validate()?;
    Ok(layer)
}

fn emit(json: bool, pairs: &[(&str, serde_json::Value)]) {
    if json {
        let map: serde_json::Map<String, serde_json::Value> = pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect();
        println!("{}", serde_json::Value::Object(map));
    } else {
        for (k, v) in pairs {
            println!("{k}={v}");
        }
    }
}

fn num(v: f64) -> serde_json::Value {
    serde_json::json!(v)
}

fn run(cli: Cli) -> Result<(), Error> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }

    match cli.command {
        Command::Quantize {
            pipe,
            synth,
            files,
            out,
        } => {
            let cfg = pipe.to_config()?;
            let bundle = match &files.experts {
                Some(path) => {
                    let calib_path = files
                        .calib
                        .as_ref()
                        .ok_or_else(|| Error::Config("--experts requires --calib".into()))?;
                    let (group, _) = load_expert_group(path)?;
                    let x_calib = load_activations(calib_path, "calib")?;
                    run_pipeline(&cfg, &group, &x_calib)?
                }
                None => {
                    let synth_cfg = synth.to_config(pipe.seed);
                    let (layer, x_calib, _) = synth_layer(&synth_cfg)?;
                    quantize_layer(&cfg, &layer, &x_calib, Some(&synth_cfg))?
                }
            };
            if cfg.idre_on && bundle.groups.iter().all(|g| g.k == 0) {
                eprintln!(
                    "note: k-ratio {} rounds down to shared rank 0 at this input \
                     dimension; no shared extraction will occur",
                    pipe.k_ratio
                );
            }
            bundle.save(&out)?;
            let report = measure_actual(&out)?;
            let rho = mean_rho(&bundle);
            emit(
                cli.json,
                &[
                    ("bundle", serde_json::json!(out.display().to_string())),
                    ("groups", serde_json::json!(bundle.groups.len())),
                    ("k", serde_json::json!(bundle.groups[0].k)),
                    ("rho_k", num(rho)),
                    ("effective_bits", num(report.effective_bits_per_weight)),
                    ("compression_ratio", num(report.compression_ratio)),
                ],
            );
            Ok(())
        }
        Command::Eval {
            bundle: bundle_path,
            files,
            top_k,
        } => {
            let bundle = QuantizedBundle::load(&bundle_path)?;
            let (layer, x_eval) = match (&bundle.provenance.synth, &files.experts) {
                (_, Some(path)) => {
                    let eval_path = files
                        .eval
                        .as_ref()
                        .ok_or_else(|| Error::Config("--experts requires --eval".into()))?;
                    let (group, gate) = load_expert_group(path)?;
                    let layer = file_layer(&group, gate, top_k)?;
                    let x_eval = load_activations(eval_path, "eval")?;
                    (layer, x_eval)
                }
                (Some(synth_cfg), None) => {
                    let (layer, _, x_eval) = synth_layer(synth_cfg)?;
                    (layer, x_eval)
                }
                (None, None) => {
                    return Err(Error::Config(
                        "bundle has no synthetic provenance; pass --experts and --eval".into(),
                    ))
                }
            };
            let (drift, compression) = evaluate(&bundle, &layer, &x_eval)?;
            emit(
                cli.json,
                &[
                    ("effective_bits", num(compression.effective_bits_per_weight)),
                    ("compression_ratio", num(compression.compression_ratio)),
                    ("output_mse", num(drift.output_mse)),
                    ("mean_shift_median", num(drift.mean_shift_median())),
                    ("var_ratio_median", num(drift.var_ratio_median())),
                    ("rho_k", num(mean_rho(&bundle))),
                ],
            );
            Ok(())
        }
        Command::SweepRank {
            pipe,
            synth,
            k_ratios,
            seeds,
        } => {
            let base = pipe.to_config()?;
            let ratios: Vec<f64> = k_ratios
                .split(',')
                .map(parse_ratio)
                .collect::<Result<_, _>>()?;
            let seeds = seeds.max(1);
            let mut rows = Vec::new();
            for ratio in &ratios {
                let cfg = PipelineConfig {
                    k_ratio: *ratio,
                    ..base.clone()
                };
                cfg.validate()?;
                let mut mses = Vec::new();
                let mut bits = 0.0;
                for s in 0..seeds {
                    let synth_cfg = synth.to_config(pipe.seed + s as u64);
                    let (_, drift, compression) = run_synth_pipeline(&synth_cfg, &cfg)?;
                    mses.push(drift.output_mse);
                    bits = compression.effective_bits_per_weight;
                }
                rows.push(serde_json::json!({
                    "k_ratio": ratio,
                    "k": k_from_ratio(synth.d_model, *ratio),
                    "output_mse": median(&mut mses),
                    "effective_bits": bits,
                }));
            }
            print_rows(
                cli.json,
                &rows,
                &["k_ratio", "k", "output_mse", "effective_bits"],
            );
            Ok(())
        }
        Command::Ablate { pipe, synth, seeds } => {
            let base = pipe.to_config()?;
            let seeds = seeds.max(1);
            let mut arms = ablation_arms(&base);
            for (name, idre_on, bcos_on) in [
                ("idre-only/no-klt", true, false),
                ("full/no-klt", true, true),
            ] {
                arms.push((
                    name.to_string(),
                    PipelineConfig {
                        idre_on,
                        bcos_on,
                        klt_on: false,
                        ..base.clone()
                    },
                ));
            }
            let mut rows = Vec::new();
            for (name, cfg) in &arms {
                let mut mses = Vec::new();
                let mut shifts = Vec::new();
                for s in 0..seeds {
                    let synth_cfg = synth.to_config(pipe.seed + s as u64);
                    let (_, drift, _) = run_synth_pipeline(&synth_cfg, cfg)?;
                    mses.push(drift.output_mse);
                    shifts.push(drift.mean_shift_median());
                }
                rows.push(serde_json::json!({
                    "arm": name,
                    "output_mse": median(&mut mses),
                    "mean_shift_median": median(&mut shifts),
                }));
            }
            print_rows(cli.json, &rows, &["arm", "output_mse", "mean_shift_median"]);
            Ok(())
        }
        Command::Report {
            m,
            l,
            n_experts,
            bits,
            vq_d,
            k_ratio,
            no_bcos,
            bundle,
        } => {
            let report = match bundle {
                Some(path) => measure_actual(&path)?,
                None => effective_bits(&BitBudget {
                    m,
                    l,
                    n: n_experts,
                    k_ratio: parse_ratio(&k_ratio)?,
                    v: vq_d,
                    b: bits,
                    include_bcos: !no_bcos,
                    include_codebook: true,
                })?,
            };
            if cli.json {
                println!("{}", serde_json::to_string(&report).unwrap());
            } else {
                emit(
                    false,
                    &[
                        ("fp16_bits", num(report.fp16_bits)),
                        ("shared_bits", num(report.shared_bits)),
                        ("index_bits", num(report.index_bits)),
                        ("codebook_bits", num(report.codebook_bits)),
                        ("bcos_bits", num(report.bcos_bits)),
                        ("overhead_bits", num(report.overhead_bits)),
                        ("total_bits", num(report.total_bits)),
                        ("total_gb", num(report.total_gb())),
                        ("effective_bits", num(report.effective_bits_per_weight)),
                        ("compression_ratio", num(report.compression_ratio)),
                        ("ratio_percent", num(report.ratio_percent())),
                        (
                            "bits_at_percent_resolution",
                            num(report.bits_at_percent_resolution()),
                        ),
                    ],
                );
            }
            Ok(())
        }
    }
}

fn mean_rho(bundle: &QuantizedBundle) -> f64 {
    let sum: f64 = bundle.groups.iter().map(|g| g.rho_k).sum();
    sum / bundle.groups.len() as f64
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn print_rows(json: bool, rows: &[serde_json::Value], columns: &[&str]) {
    if json {
        println!("{}", serde_json::Value::Array(rows.to_vec()));
        return;
    }
    println!("{}", columns.join("\t"));
    for row in rows {
        let line: Vec<String> = columns
            .iter()
            .map(|c| match &row[c] {
                serde_json::Value::String(s) => s.clone(),
                v => v.to_string(),
            })
            .collect();
        println!("{}", line.join("\t"));
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
