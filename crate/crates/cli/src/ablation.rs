//! Post-Softmax quantizer ablation and shared-factor A/B runs.

use dopq_core::pipeline::{ab_compare_scaling, run_dopq, AbReport, PipelineConfig, PlanTemplate, RunReport};
use dopq_core::toyvit::OutlierSite;
use dopq_core::{QuantizerKind, Result};
use serde::{Deserialize, Serialize};

use crate::data::Lab;

/// Post-Softmax families compared by the quantizer ablation.
pub const TANQ_KINDS: [QuantizerKind; 4] = [
    QuantizerKind::Uniform,
    QuantizerKind::Log2,
    QuantizerKind::Sulq,
    QuantizerKind::Tan,
];

/// Activation bit-width of the full-precision control row.
pub const CONTROL_BITS: u32 = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TanqRow {
    pub quantizer: QuantizerKind,
    pub bits_a: u32,
    pub top1_agreement: f64,
    pub mean_block_mse: f64,
    pub block_mse: Vec<f64>,
    pub traces_nonincreasing: bool,
}

/// An expected ordering between two rows and whether it held.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCheck {
    pub claim: String,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TanqAblation {
    pub seed: u64,
    pub rows: Vec<TanqRow>,
    pub control: Option<TanqRow>,
    pub checks: Vec<PairCheck>,
}

impl TanqAblation {
    pub fn row(&self, kind: QuantizerKind) -> Option<&TanqRow> {
        self.rows.iter().find(|r| r.quantizer == kind)
    }
}

/// Activations-only pipeline (full-precision weights) with `softmax` at
/// the post-Softmax sites.
pub fn activation_config(softmax: QuantizerKind, bits_a: u32) -> PipelineConfig {
    PipelineConfig {
        template: PlanTemplate {
            bits_a,
            softmax,
            ..PlanTemplate::default()
        },
        activations_only: true,
        ..PipelineConfig::default()
    }
}

fn tanq_row(lab: &Lab, kind: QuantizerKind, bits_a: u32) -> Result<TanqRow> {
    let r = run_dopq(&lab.weights, &lab.calib, &lab.eval, &activation_config(kind, bits_a))?.report;
    Ok(TanqRow {
        quantizer: kind,
        bits_a,
        top1_agreement: r.eval.top1_agreement,
        mean_block_mse: r.eval.mean_block_mse,
        traces_nonincreasing: r.traces_nonincreasing(),
        block_mse: r.eval.block_mse,
    })
}

/// One activations-only run per family in `kinds` at `bits_a`, plus an
/// optional high-precision uniform control row. Checks the expected
/// agreement ordering `uq ≤ log2`, `sulq ≥ log2`, `tanq ≥ log2` for the
/// families present.
pub fn ablation_tanq(lab: &Lab, seed: u64, bits_a: u32, kinds: &[QuantizerKind], control: bool) -> Result<TanqAblation> {
    let rows = kinds
        .iter()
        .map(|&k| tanq_row(lab, k, bits_a))
        .collect::<Result<Vec<_>>>()?;
    let control = if control {
        Some(tanq_row(lab, QuantizerKind::Uniform, CONTROL_BITS)?)
    } else {
        None
    };
    let mut out = TanqAblation {
        seed,
        rows,
        control,
        checks: Vec::new(),
    };
    let agree = |k| out.row(k).map(|r| r.top1_agreement);
    let log = agree(QuantizerKind::Log2);
    let mut checks = Vec::new();
    if let (Some(u), Some(l)) = (agree(QuantizerKind::Uniform), log) {
        checks.push(PairCheck {
            claim: "uq <= log2".into(),
            holds: u <= l,
        });
    }
    for k in [QuantizerKind::Sulq, QuantizerKind::Tan] {
        if let (Some(a), Some(l)) = (agree(k), log) {
            checks.push(PairCheck {
                claim: format!("{k} >= log2"),
                holds: a >= l,
            });
        }
    }
    if let Some(c) = &out.control {
        checks.push(PairCheck {
            claim: format!("a{CONTROL_BITS} control agrees fully"),
            holds: c.top1_agreement == 1.0,
        });
    }
    out.checks = checks;
    Ok(out)
}

pub const MOSF_FACTORS: [f64; 3] = [1.0, 10.0, 50.0];

/// Relative MSE gap under which the two rules count as agreeing when no
/// outlier is injected.
pub const NO_OUTLIER_REL_TOL: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosfEntry {
    pub factor: f64,
    pub outliers: Vec<OutlierSite>,
    pub ab: AbReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosfAblation {
    pub seed: u64,
    pub bits_w: u32,
    pub bits_a: u32,
    pub entries: Vec<MosfEntry>,
    pub checks: Vec<PairCheck>,
}

/// Full-pipeline config at the given bit-widths.
pub fn full_config(bits_w: u32, bits_a: u32) -> PipelineConfig {
    PipelineConfig {
        template: PlanTemplate {
            bits_w,
            bits_a,
            ..PlanTemplate::default()
        },
        ..PipelineConfig::default()
    }
}

/// Median- vs. mean-rule runs on the standard lab of `seed` for each
/// outlier factor.
pub fn ablation_mosf(seed: u64, factors: &[f64], bits_w: u32, bits_a: u32) -> Result<MosfAblation> {
    let cfg = full_config(bits_w, bits_a);
    let mut entries = Vec::new();
    let mut checks = Vec::new();
    for &factor in factors {
        let lab = Lab::standard(seed, factor)?;
        let ab = ab_compare_scaling(&lab.weights, &lab.calib, &lab.eval, &cfg)?;
        if factor == 1.0 {
            checks.push(PairCheck {
                claim: format!("factor 1: |mosf - repq| <= {NO_OUTLIER_REL_TOL} relative"),
                holds: ab.rel_diff.abs() <= NO_OUTLIER_REL_TOL,
            });
        } else {
            checks.push(PairCheck {
                claim: format!("factor {factor}: mosf mse <= repq mse"),
                holds: ab.median_not_worse,
            });
        }
        entries.push(MosfEntry {
            factor,
            outliers: lab.outliers,
            ab,
        });
    }
    Ok(MosfAblation {
        seed,
        bits_w,
        bits_a,
        entries,
        checks,
    })
}

fn path_rows(factor: f64, path: &str, r: &RunReport) -> Vec<Vec<String>> {
    r.eval
        .block_mse
        .iter()
        .enumerate()
        .map(|(b, m)| {
            vec![
                factor.to_string(),
                path.to_string(),
                b.to_string(),
                m.to_string(),
                r.eval.top1_agreement.to_string(),
            ]
        })
        .collect()
}

pub const MOSF_HEADER: [&str; 5] = ["factor", "path", "block", "heldout_mse", "top1_agreement"];

pub fn mosf_rows(a: &MosfAblation) -> Vec<Vec<String>> {
    a.entries
        .iter()
        .flat_map(|e| {
            let mut rows = path_rows(e.factor, "mosf", &e.ab.mosf);
            rows.extend(path_rows(e.factor, "repq", &e.ab.repq));
            rows
        })
        .collect()
}

pub const MOSF_MAD_HEADER: [&str; 7] = ["factor", "path", "block", "site", "statistic", "candidate", "mad"];

pub fn mosf_mad_rows(a: &MosfAblation) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    for e in &a.entries {
        for (path, r) in [("mosf", &e.ab.mosf), ("repq", &e.ab.repq)] {
            for row in crate::output::mad_rows(r) {
                let mut full = vec![e.factor.to_string(), path.to_string()];
                full.extend(row);
                out.push(full);
            }
        }
    }
    out
}

pub const TANQ_HEADER: [&str; 5] = ["quantizer", "bits_a", "top1_agreement", "mean_block_mse", "control"];

pub fn tanq_rows(a: &TanqAblation) -> Vec<Vec<String>> {
    let row = |r: &TanqRow, control: bool| {
        vec![
            r.quantizer.name().to_string(),
            r.bits_a.to_string(),
            r.top1_agreement.to_string(),
            r.mean_block_mse.to_string(),
            control.to_string(),
        ]
    };
    let mut out: Vec<Vec<String>> = a.rows.iter().map(|r| row(r, false)).collect();
    out.extend(a.control.iter().map(|r| row(r, true)));
    out
}
