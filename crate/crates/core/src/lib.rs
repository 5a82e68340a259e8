//! Post-training quantization of linear-layer stacks.
//!
//! The pieces, bottom-up:
//!
//! - [`tensor`] / [`rng`]: dense arrays, reductions and seeded randomness.
//! - [`quantizers`]: affine quantization, pre-scaling, the dynamic-range
//!   adaptive activation quantizer and the straight-through gradient.
//! - [`rotation`]: orthogonal Hadamard rotations and the fast transform.
//! - [`lowrank`]: truncated SVD, the quantization-aware alternating optimizer
//!   and the two-branch quantized linear layer.
//! - [`volts`]: variance-guided layer sensitivity and budget allocation.
//! - [`accounting`]: effective parameter / operation counts.
//! - [`harness`]: synthetic models and activations, error metrics, the
//!   standard benchmark and the ablation arms.
//! - [`config`]: the declarative run configuration.
//! - [`model`]: full-precision and quantized layer stacks and their archives.

pub mod accounting;
pub mod artifact;
pub mod config;
pub mod error;
pub mod harness;
pub mod lowrank;
pub mod model;
pub mod quantizers;
pub mod rng;
pub mod rotation;
pub mod tensor;
pub mod volts;

pub use error::{Error, Result};
pub use tensor::{ActBatch, Matrix};
