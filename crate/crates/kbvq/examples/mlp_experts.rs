//! The gated-MLP expert mode: each expert is silu(Wg x) ⊙ (Wu x) through a
//! down projection, quantized as three role groups. The down projection is
//! calibrated on the hidden activations the quantized gate/up path actually
//! produces.
//!
//! ```bash
//! cargo run --example mlp_experts
//! ```

use kbvq::moesim::{synth_layer, SynthConfig};
use kbvq::pipeline::{evaluate, quantize_layer, PipelineConfig};

fn main() {
    let synth = SynthConfig {
        d_model: 64,
        oc: 48,
        mlp_hidden: Some(32),
        batch: 128,
        ..SynthConfig::default()
    };
    let cfg = PipelineConfig {
        k_ratio: 1.0 / 32.0,
        ..PipelineConfig::default()
    };
    let (layer, x_calib, x_eval) = synth_layer(&synth).unwrap();
    let bundle = quantize_layer(&cfg, &layer, &x_calib, Some(&synth)).unwrap();

    println!("quantized {} role groups:", bundle.groups.len());
    for g in &bundle.groups {
        println!(
            "  {:<5} {} experts of {}x{}, shared rank {}, rho_k {:.3}",
            g.role_label, g.n, g.oc, g.ic, g.k, g.rho_k
        );
    }

    let (drift, compression) = evaluate(&bundle, &layer, &x_eval).unwrap();
    println!("layer output MSE   = {:.6e}", drift.output_mse);
    println!("mean shift median  = {:.6e}", drift.mean_shift_median());
    println!(
        "effective bits     = {:.3} ({}% compression)",
        compression.effective_bits_per_weight,
        compression.ratio_percent()
    );
}
