//! Build an input-coherence basis from calibration activations and verify
//! the property it exists for: weight error measured through the basis
//! equals output mean-squared error.
//!
//! ```bash
//! cargo run --example klt_basis
//! ```

use kbvq::idre::{build_klt_basis, weighted_output_mse};
use kbvq::moesim::{synth_layer, SynthConfig};
use kbvq::numerics::{covariance, Matrix};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() {
    let cfg = SynthConfig {
        d_model: 32,
        batch: 512,
        ..SynthConfig::default()
    };
    let (_, x_calib, _) = synth_layer(&cfg).unwrap();
    let basis = build_klt_basis(&x_calib, 1e-8).unwrap();

    println!("calibration batch: {}x{}", x_calib.rows(), x_calib.cols());
    println!("top covariance eigenvalues:");
    for (i, lam) in basis.eigenvalues.iter().take(8).enumerate() {
        println!("  lambda[{i}] = {lam:.5}");
    }

    // U_X U_Xᵀ reconstructs the covariance.
    let c = covariance(&x_calib).unwrap();
    let rec = basis.u_x.matmul(&basis.u_x.transpose()).unwrap();
    let rec_err = rec.sub(&c).unwrap().max_abs() / c.max_abs();
    println!("covariance reconstruction error: {rec_err:.2e}");

    // The reason the basis exists: for any weight-error matrix E, the
    // Frobenius norm of E*U_X equals the input-weighted output MSE.
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let e = Matrix::from_fn(16, 32, |_, _| rng.gen_range(-0.1..0.1));
    let trace_form = weighted_output_mse(&e, &c).unwrap();
    let projected = e.matmul(&basis.u_x).unwrap().sq_frobenius_norm();
    println!("trace form        : {trace_form:.9}");
    println!("projected Frobenius: {projected:.9}");
    println!(
        "relative gap       : {:.2e}",
        (trace_form - projected).abs() / projected
    );
}
