//! Sweep the shared-subspace rank ratio. The first extracted direction buys
//! a large error drop, after which gains flatten while storage keeps
//! growing; the default ratio sits at that knee.
//!
//! ```bash
//! cargo run --example rank_sweep
//! ```

use kbvq::moesim::SynthConfig;
use kbvq::pipeline::{k_from_ratio, run_synth_pipeline, PipelineConfig};

fn main() {
    let synth = SynthConfig::default();
    println!(
        "{:>8} {:>4} {:>14} {:>16} {:>8}",
        "k_ratio", "k", "output_mse", "effective_bits", "rho_k"
    );
    for (label, ratio) in [
        ("1/256", 1.0 / 256.0),
        ("1/128", 1.0 / 128.0),
        ("1/64", 1.0 / 64.0),
        ("1/32", 1.0 / 32.0),
        ("1/16", 1.0 / 16.0),
    ] {
        let cfg = PipelineConfig {
            k_ratio: ratio,
            ..PipelineConfig::default()
        };
        let (bundle, drift, compression) = run_synth_pipeline(&synth, &cfg).unwrap();
        println!(
            "{:>8} {:>4} {:>14.6e} {:>16.4} {:>8.4}",
            label,
            k_from_ratio(synth.d_model, ratio),
            drift.output_mse,
            compression.effective_bits_per_weight,
            bundle.groups[0].rho_k
        );
    }
}
