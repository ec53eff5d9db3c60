//! Compression toolkit for groups of mixture-of-experts weight matrices.
//!
//! The pipeline has three stages:
//!
//! 1. **Redundancy elimination** ([`idre`]) — build an input-coherence basis
//!    from calibration activations, project every expert weight matrix into
//!    it, stack the projections, and pull out a rank-k shared factor that is
//!    kept at full precision. What remains is a small expert-specific
//!    residual per expert.
//! 2. **Vector quantization** ([`vq`]) — split each residual into length-d
//!    sub-vectors and quantize them against a per-expert k-means codebook.
//! 3. **Output stabilization** ([`bcos`]) — fit a per-output-channel affine
//!    correction `(1+s)⊙ŷ + b` so the quantized outputs match the original
//!    output statistics on the calibration set.
//!
//! [`moesim`] provides a synthetic MoE layer (top-k gating over linear or
//! gated-MLP experts) for end-to-end verification at desk scale, [`report`]
//! does the storage accounting, [`baselines`] has RTN and plain-VQ reference
//! quantizers, and [`pipeline`] ties everything together behind a stable
//! on-disk bundle format.
//!
//! Every operation is deterministic: identical inputs, configs, and seeds
//! produce bit-identical outputs regardless of thread count.
//!
//! See the `examples/` directory for one runnable walkthrough per capability
//! and the `kbvq` binary for the command-line driver.

pub mod baselines;
pub mod bcos;
pub mod bundle;
pub mod error;
pub mod idre;
pub mod moesim;
pub mod numerics;
pub mod pipeline;
pub mod report;
pub mod tensor_file;
pub mod vq;

pub use error::{Error, Result};
pub use numerics::Matrix;
