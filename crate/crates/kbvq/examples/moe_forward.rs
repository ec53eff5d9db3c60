//! Drive the synthetic mixture-of-experts layer: routing statistics, the
//! gated forward pass, and the output overlap between experts that
//! motivates shared-structure extraction.
//!
//! ```bash
//! cargo run --example moe_forward
//! ```

use kbvq::moesim::{forward, gate, mean_pairwise_cosine, synth_layer, Expert, SynthConfig};

fn main() {
    let cfg = SynthConfig::default();
    let (layer, _, x_eval) = synth_layer(&cfg).unwrap();
    println!(
        "layer: {} routing experts ({}x{}), top-{} gating",
        layer.n(),
        layer.oc(),
        layer.d_model(),
        layer.top_k
    );

    // Routing statistics over the eval batch.
    let mut load = vec![0usize; layer.n()];
    for t in 0..x_eval.rows() {
        let (_, selected) = gate(&layer, x_eval.row(t)).unwrap();
        for j in selected {
            load[j] += 1;
        }
    }
    println!("expert load over {} tokens: {load:?}", x_eval.rows());

    let out = forward(&layer, &x_eval, None).unwrap();
    println!("forward output: {}x{}", out.rows(), out.cols());

    // Expert outputs overlap heavily when weights share structure.
    let outputs: Vec<_> = layer
        .routing_experts
        .iter()
        .map(|e| match e {
            Expert::Linear(w) => x_eval.matmul(&w.transpose()).unwrap(),
            _ => unreachable!(),
        })
        .collect();
    let cos = mean_pairwise_cosine(&outputs).unwrap();
    println!("mean pairwise output cosine across experts: {cos:.4}");

    let pure_noise = SynthConfig {
        shared_rank: 0,
        ..cfg
    };
    let (noise_layer, _, x2) = synth_layer(&pure_noise).unwrap();
    let outputs: Vec<_> = noise_layer
        .routing_experts
        .iter()
        .map(|e| match e {
            Expert::Linear(w) => x2.matmul(&w.transpose()).unwrap(),
            _ => unreachable!(),
        })
        .collect();
    println!(
        "same figure with no shared structure: {:.4}",
        mean_pairwise_cosine(&outputs).unwrap()
    );
}
