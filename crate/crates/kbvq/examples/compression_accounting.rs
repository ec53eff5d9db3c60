//! Storage accounting two ways: the closed-form bit budget for a
//! production-scale group, and the measured size of an actual desk-scale
//! bundle checked against the same formula.
//!
//! ```bash
//! cargo run --example compression_accounting
//! ```

use kbvq::moesim::SynthConfig;
use kbvq::pipeline::{run_synth_pipeline, PipelineConfig};
use kbvq::report::{effective_bits, rtn_effective_bits, BitBudget};

fn main() {
    // A production-scale gate projection: 64 experts of 5632x2048 at 2 bits
    // with sub-vector length 4 and a 1/128 shared-rank ratio.
    let budget = BitBudget {
        m: 5632,
        l: 2048,
        n: 64,
        k_ratio: 1.0 / 128.0,
        v: 4,
        b: 2,
        include_bcos: true,
        include_codebook: true,
    };
    let rep = effective_bits(&budget).unwrap();
    println!("--- closed-form budget, production scale ---");
    println!("fp16 storage   : {:.2} GB", rep.fp16_gb());
    println!("compressed     : {:.2} GB", rep.total_gb());
    println!("  shared factors {:>13} bits", rep.shared_bits);
    println!("  indices        {:>13} bits", rep.index_bits);
    println!("  codebooks      {:>13} bits", rep.codebook_bits);
    println!("  corrections    {:>13} bits", rep.bcos_bits);
    println!(
        "ratio {}% -> {} bits/weight at percent resolution ({:.4} exact)",
        rep.ratio_percent(),
        rep.bits_at_percent_resolution(),
        rep.effective_bits_per_weight
    );
    println!(
        "overhead beyond the raw 2-bit payload: {:.4} bits/weight",
        rep.overhead_bits_per_weight(2)
    );

    let rtn = rtn_effective_bits(5632, 2048, 64, 2, 128, true).unwrap();
    println!(
        "round-to-nearest at the same width: {:.4} bits/weight",
        rtn.effective_bits_per_weight
    );

    // Desk scale: quantize for real and compare the measured bundle against
    // the same formula.
    println!("--- measured vs predicted, desk scale ---");
    let (_, _, measured) =
        run_synth_pipeline(&SynthConfig::default(), &PipelineConfig::default()).unwrap();
    let predicted = effective_bits(&BitBudget {
        m: 64,
        l: 128,
        n: 8,
        k_ratio: 1.0 / 128.0,
        v: 4,
        b: 2,
        include_bcos: true,
        include_codebook: true,
    })
    .unwrap();
    println!("predicted total: {} bits", predicted.total_bits);
    println!(
        "measured total : {} bits (framing overhead {} bits)",
        measured.total_bits, measured.overhead_bits
    );
    println!(
        "gap: {:.2}%",
        100.0 * (measured.total_bits - predicted.total_bits).abs() / predicted.total_bits
    );
}
