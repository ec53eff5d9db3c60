//! Fit the per-channel output correction for one quantized expert and watch
//! it pull the quantized output statistics back onto the originals.
//!
//! ```bash
//! cargo run --example bias_correction
//! ```

use kbvq::bcos::{apply_correction, collect_paired_stats, fit_mmse_regression, fit_variance_match};
use kbvq::moesim::{synth_layer, Expert, SynthConfig};
use kbvq::vq::{quantize_matrix, reconstruct, VqConfig};

fn main() {
    let (layer, x_calib, _) = synth_layer(&SynthConfig::default()).unwrap();
    let w = match &layer.routing_experts[0] {
        Expert::Linear(w) => w.clone(),
        _ => unreachable!(),
    };

    // Quantize the raw expert directly; the drift is what the correction
    // must absorb.
    let w_hat = reconstruct(&quantize_matrix(&w, &VqConfig::default()).unwrap()).unwrap();
    let (stats_y, stats_yhat) = collect_paired_stats(&w, &w_hat, &x_calib).unwrap();

    let j = 0;
    println!("channel {j} before correction:");
    println!("  mean {:.5} -> {:.5}", stats_y.mean[j], stats_yhat.mean[j]);
    println!("  std  {:.5} -> {:.5}", stats_y.std[j], stats_yhat.std[j]);

    let y = x_calib.matmul(&w.transpose()).unwrap();
    let y_hat = x_calib.matmul(&w_hat.transpose()).unwrap();
    let uncorrected_mse = y_hat.sub(&y).unwrap().sq_frobenius_norm();

    for (name, corr) in [
        (
            "variance-match",
            fit_variance_match(&stats_y, &stats_yhat).unwrap(),
        ),
        (
            "mmse-regression",
            fit_mmse_regression(&stats_y, &stats_yhat).unwrap(),
        ),
    ] {
        let fixed = apply_correction(&y_hat, &corr).unwrap();
        let mse = fixed.sub(&y).unwrap().sq_frobenius_norm();
        let mean_gap: f64 = (0..fixed.cols())
            .map(|c| {
                let m: f64 =
                    (0..fixed.rows()).map(|t| fixed.get(t, c)).sum::<f64>() / fixed.rows() as f64;
                (m - stats_y.mean[c]).abs()
            })
            .fold(0.0, f64::max);
        println!(
            "{name:>16}: s[0] = {:+.4}, b[0] = {:+.4}, mse {:.5e} (uncorrected {:.5e}), worst mean gap {:.2e}",
            corr.s[j], corr.b[j], mse, uncorrected_mse, mean_gap
        );
    }
    println!(
        "each correction stores 2 parameters per output channel ({} total here)",
        2 * w.rows()
    );
}
