//! Full three-stage runs into a run directory.

use std::fs;
use std::path::Path;

use dopq_core::pipeline::{run_dopq, DopqOutcome, RunReport};
use dopq_core::toyvit::{save_weights, OutlierSite};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, RunManifest};
use crate::data::Lab;
use crate::error::{CliError, Result};
use crate::output::{block_rows, mad_rows, write_csv, write_json, BLOCKS_HEADER, MAD_HEADER};

pub const REPORT_SCHEMA: &str = "dopq.report/v1";

/// Relative tolerance of the reparameterization checks.
pub const EQUIVALENCE_TOL: f64 = 1e-9;

/// Invariants checked after every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunChecks {
    /// Every block's loss trace in stages 1 and 3 is nonincreasing.
    pub traces_nonincreasing: bool,
    /// Every post-LayerNorm site: identical codes and equal linear outputs
    /// (within [`EQUIVALENCE_TOL`]) on both quantization paths.
    pub reparam_equivalent: bool,
    /// Largest relative change of a quantized block output across
    /// reparameterization.
    pub stage2_max_rel_delta: f64,
    /// The median row of every MAD table is minimal.
    pub median_mad_minimal: bool,
}

impl RunChecks {
    pub fn of(report: &RunReport) -> Self {
        Self {
            traces_nonincreasing: report.traces_nonincreasing(),
            reparam_equivalent: report.stage2.iter().all(|s| s.equivalence.holds(EQUIVALENCE_TOL)),
            stage2_max_rel_delta: report
                .stage2_safety
                .iter()
                .map(|s| s.max_rel_delta)
                .fold(0.0, f64::max),
            median_mad_minimal: report.stage2.iter().all(|s| s.mad.median_is_minimal(1e-12)),
        }
    }

    pub fn failures(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.traces_nonincreasing {
            out.push("a reconstruction loss trace increased".to_string());
        }
        if !self.reparam_equivalent {
            out.push("reparameterization changed codes or outputs".to_string());
        }
        if self.stage2_max_rel_delta > EQUIVALENCE_TOL {
            out.push(format!(
                "block outputs moved by {:e} (relative) across reparameterization",
                self.stage2_max_rel_delta
            ));
        }
        if !self.median_mad_minimal {
            out.push("median is not the MAD minimizer".to_string());
        }
        out
    }
}

/// Contents of `report.json`: everything needed to reproduce the run and
/// nothing that varies between identical runs (no paths, times or thread
/// counts).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDocument {
    pub schema: String,
    pub config: RunConfig,
    pub outliers: Vec<OutlierSite>,
    pub checks: RunChecks,
    pub report: RunReport,
}

/// Builds the lab and runs the pipeline, without touching the filesystem.
pub fn execute(cfg: &RunConfig) -> Result<(DopqOutcome, RunDocument)> {
    cfg.validate()?;
    let lab = Lab::build(&cfg.model(), cfg.seed, cfg.calib_size, cfg.eval_size, cfg.outlier_factor)?;
    let out = run_dopq(&lab.weights, &lab.calib, &lab.eval, &cfg.pipeline)?;
    let doc = RunDocument {
        schema: REPORT_SCHEMA.into(),
        config: cfg.clone(),
        outliers: lab.outliers,
        checks: RunChecks::of(&out.report),
        report: out.report.clone(),
    };
    Ok((out, doc))
}

/// Runs the pipeline and writes `manifest.json`, `report.json`,
/// `blocks.csv`, `mad_tables.csv`, `plan.json` and `weights/` into `out`.
/// Outputs are written even when a check fails; the failure is then
/// returned as an invariant error.
pub fn cmd_run(cfg: &RunConfig, config_path: Option<&Path>, out: &Path) -> Result<RunDocument> {
    let (outcome, doc) = execute(cfg)?;
    fs::create_dir_all(out)?;
    write_json(&out.join("manifest.json"), &RunManifest::new("run", cfg.seed, config_path, out))?;
    write_json(&out.join("report.json"), &doc)?;
    write_csv(&out.join("blocks.csv"), &BLOCKS_HEADER, &block_rows(&doc.report))?;
    write_csv(&out.join("mad_tables.csv"), &MAD_HEADER, &mad_rows(&doc.report))?;
    write_json(&out.join("plan.json"), &outcome.plan)?;
    save_weights(out.join("weights"), &outcome.weights)?;
    let failures = doc.checks.failures();
    if !failures.is_empty() {
        return Err(CliError::Invariant(failures.join("; ")));
    }
    Ok(doc)
}
