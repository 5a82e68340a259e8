//! Synthetic test bed: generated models and activations, error metrics and
//! the seeded benchmark with its ablation arms.

pub mod bench;
pub mod metrics;
pub mod synth;

pub use bench::{activation_errors, instance, render_summary, summarize, ActivationErrors, Arm, ArmResult, ArmSummary, Axis, DataSpec, Instance, ModelShape, SeedContext};
pub use metrics::{error_metrics, eval_model_error, ErrorMetrics};
pub use synth::{gen_dataset, gen_longtail, gen_model, gen_sample, BiasDist, LongTailSpec, SyntheticModelSpec, WeightDist};
