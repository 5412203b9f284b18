//! Shared inputs for the benchmarks.

use dopq_core::pipeline::{calibrate_model, PlanTemplate};
use dopq_core::toyvit::{gaussian_tokens, init_weights, softmax, QuantPlan, ViTConfig, ViTWeights};
use dopq_core::Tensor;

/// Deterministic pseudo-random values in `[-1, 1)`.
pub fn values(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect()
}

/// Rows of a peaked softmax, `[rows, n]`.
pub fn softmax_corpus(rows: usize, n: usize) -> Tensor {
    let logits = values(rows * n, 7).into_iter().map(|v| 5.0 * v).collect();
    softmax(&Tensor::new(vec![rows, n], logits).expect("shape")).expect("softmax")
}

/// The lab model with a calibrated W4A4 plan and a 32-sequence batch.
pub fn lab_fixture() -> (ViTWeights, QuantPlan, Tensor) {
    let cfg = ViTConfig::lab(0);
    let w = init_weights(&cfg).expect("weights");
    let x = gaussian_tokens(&cfg, 32, 1).expect("tokens");
    let t = PlanTemplate {
        tan_sample: 2048,
        ..PlanTemplate::default()
    };
    let plan = calibrate_model(&w, &x, &t).expect("plan");
    (w, plan, x)
}
