//! Memory-efficient transfer learning at desk scale.
//!
//! A frozen backbone is held in low-bit asymmetric weight-only quantization
//! and periodically re-quantized after a Gaussian perturbation that mimics
//! accumulated weight drift. The memory saved pays for a sparse
//! mixture-of-experts side network whose routing is nudged by the similarity
//! between the backbone's salient token and per-expert representative tokens.
//!
//! Modules:
//! - [`numerics`]: dense f64 tensors, forward/backward kernels and a gradient tape.
//! - [`quantizer`]: calibration, quantization, dequantization and the error metric.
//! - [`requant`]: drift tracking, noise fitting and iterative re-quantization.
//! - [`moe_router`]: top-k gating, correlation-guided refinement, load balancing.
//! - [`side_network`]: frozen backbone stub, side blocks, optimizer, checkpoints.
//! - [`memory_model`]: analytic backprop memory accounting.
//! - [`harness`]: synthetic tasks, experiment runs and ablation sweeps.
//! - [`cli`]: the `sidemoe` command-line front end.

pub mod cli;
pub mod error;
pub mod harness;
pub mod memory_model;
pub mod moe_router;
pub mod numerics;
pub mod quantizer;
pub mod requant;
pub mod rng;
pub mod side_network;

pub use error::{Error, Result};
