//! The whole pipeline on a synthetic layer: calibrate, extract the shared
//! subspace, vector-quantize the residuals, fit the output corrections,
//! serialize the bundle, reload it, and evaluate the damage.
//!
//! ```bash
//! cargo run --example full_pipeline
//! ```

use kbvq::moesim::{synth_layer, SynthConfig};
use kbvq::pipeline::{evaluate, load_bundle, quantize_layer, save_bundle, PipelineConfig};

fn main() {
    let synth = SynthConfig::default();
    let cfg = PipelineConfig::default();
    let (layer, x_calib, x_eval) = synth_layer(&synth).unwrap();

    let bundle = quantize_layer(&cfg, &layer, &x_calib, Some(&synth)).unwrap();
    let group = &bundle.groups[0];
    println!(
        "quantized {} experts of {}x{}: shared rank {}, rho_k = {:.4}",
        group.n, group.oc, group.ic, group.k, group.rho_k
    );

    let path = std::env::temp_dir().join("kbvq_example_bundle.kbvq");
    save_bundle(&bundle, &path).unwrap();
    println!(
        "bundle written to {} ({} bytes)",
        path.display(),
        std::fs::metadata(&path).unwrap().len()
    );

    let reloaded = load_bundle(&path).unwrap();
    assert_eq!(reloaded, bundle);
    println!("reload is bit-exact");

    let (drift, compression) = evaluate(&reloaded, &layer, &x_eval).unwrap();
    println!("--- evaluation on the held-out batch ---");
    println!("output_mse         = {:.6e}", drift.output_mse);
    println!("mean_shift_median  = {:.6e}", drift.mean_shift_median());
    println!("var_ratio_median   = {:.4}", drift.var_ratio_median());
    println!(
        "effective bits     = {:.3} ({}% compression vs 16-bit)",
        compression.effective_bits_per_weight,
        compression.ratio_percent()
    );
    println!(
        "section bits: shared {} | indices {} | codebooks {} | corrections {} | framing {}",
        compression.shared_bits,
        compression.index_bits,
        compression.codebook_bits,
        compression.bcos_bits,
        compression.overhead_bits
    );
    std::fs::remove_file(&path).ok();
}
