//! Train a vector-quantization codebook on one matrix and compare the
//! reconstruction against the round-to-nearest scalar baseline at the same
//! nominal bit width.
//!
//! ```bash
//! cargo run --example codebook_training
//! ```

use kbvq::baselines::{rtn_quantize, RtnConfig};
use kbvq::numerics::Matrix;
use kbvq::vq::{
    kmeanspp_init, lloyd_train, partition_subvectors, quantize_matrix, reconstruct, VqConfig,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let w = Matrix::from_fn(64, 128, |_, _| rng.gen_range(-0.5..0.5));
    let cfg = VqConfig::default(); // d = 4, 2 bits/weight, K = 256

    // The stages individually: partition, seed, refine.
    let subs = partition_subvectors(&w, cfg.d).unwrap();
    println!(
        "{} sub-vectors of length {}, {} padded elements",
        subs.count(),
        subs.d(),
        subs.pad_count()
    );
    let init = kmeanspp_init(&subs, cfg.codebook_size(), cfg.seed).unwrap();
    let (_, trace) = lloyd_train(&subs, &init, cfg.iters).unwrap();
    println!(
        "Lloyd converged after {} assignment passes (inertia {:.5} -> {:.5})",
        trace.len(),
        trace.first().unwrap(),
        trace.last().unwrap()
    );

    // And the one-call version.
    let q = quantize_matrix(&w, &cfg).unwrap();
    let rec = reconstruct(&q).unwrap();
    let vq_mse = rec.sub(&w).unwrap().sq_frobenius_norm() / (64.0 * 128.0);

    let rtn = rtn_quantize(
        &w,
        &RtnConfig {
            bits: cfg.bits_per_weight,
            group_size: 128,
            symmetric: true,
        },
    )
    .unwrap();
    let rtn_mse = rtn.sub(&w).unwrap().sq_frobenius_norm() / (64.0 * 128.0);

    println!("vector quantizer MSE at 2 bits: {vq_mse:.6e}");
    println!("round-to-nearest MSE at 2 bits: {rtn_mse:.6e}");
    println!("ratio: {:.2}x", rtn_mse / vq_mse);
}
