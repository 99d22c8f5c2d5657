//! Proxy estimation: per-harmonic fits (Step 1) and cross-harmonic gauge alignment
//! (Step 2).

mod align;
pub(crate) mod predict;
mod step1;

pub use align::{
    align, alignment_gradient, alignment_loss, initial_gauges, load_aligned_proxies, truncated_normal, Adam,
    AlignmentResult, OptimizerConfig,
};
pub use predict::{predict_channel, MODULUS_EPS};
pub use step1::{
    default_static_k, step1_estimate, surrogate_step1, truth_proxies, Step1Config, Step1Diagnostics, Step1Result,
};
