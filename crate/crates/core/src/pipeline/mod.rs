//! Calibration, block-wise reconstruction and the three-stage run:
//! quantize activations and reconstruct; reparameterize post-LayerNorm
//! sites channel-wise → layer-wise; quantize weights and reconstruct again.

mod calibrate;
mod recon;
mod run;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizers::{check_bits, QuantizerKind, SearchGrid};
use crate::reparam::ScaleSelect;

pub use calibrate::{calibrate_model, calibrate_weights, subsample_with_extremes};
pub use recon::{block_loss, reconstruct_block, BlockRecord, Knob, ReconOutcome};
pub use run::{
    ab_compare_scaling, evaluate, run_dopq, AbReport, BlockStageReport, DopqOutcome, EvalReport,
    ReparamSiteReport, RunReport, Stage2BlockReport,
};

/// Bit-widths and the post-Softmax quantizer family used at calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanTemplate {
    pub bits_w: u32,
    pub bits_a: u32,
    pub softmax: QuantizerKind,
    /// Tan search candidates (curvature range and point counts).
    pub tan_grid: GridSpec,
    /// Post-Softmax values kept for the tan parameter search; the corpus
    /// extremes are always kept.
    pub tan_sample: usize,
}

impl Default for PlanTemplate {
    fn default() -> Self {
        Self {
            bits_w: 4,
            bits_a: 4,
            softmax: QuantizerKind::Tan,
            tan_grid: GridSpec::default(),
            tan_sample: 8192,
        }
    }
}

/// Serializable description of a [`SearchGrid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub a_min: f64,
    pub a_max: f64,
    pub a_points: usize,
    pub b_points: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            a_min: 0.3,
            a_max: 12.0,
            a_points: 32,
            b_points: 32,
        }
    }
}

impl GridSpec {
    pub fn grid(&self) -> SearchGrid {
        SearchGrid::new(self.a_min, self.a_max, self.a_points, self.b_points)
    }
}

/// Coordinate-descent settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    /// Full sweeps over every knob; stops early after a sweep with no change.
    pub passes: usize,
    /// Points of the multiplicative grid around the current value.
    pub grid_points: usize,
    /// The coarse grid spans `[1/span, span]` times the current value.
    pub span: f64,
    /// Whether a second, finer grid is searched between the neighbours of
    /// the coarse optimum.
    pub refine: bool,
    /// Calibration sequences the block loss is measured on.
    pub batch: usize,
    /// Whether the tan quantizer's curvature and focus are tuned.
    pub tune_tan: bool,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            passes: 4,
            grid_points: 33,
            span: 2.0,
            refine: true,
            batch: 16,
            tune_tan: true,
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.passes == 0 || self.grid_points < 2 || self.batch == 0 {
            return Err(Error::Config(
                "reconstruction needs passes ≥ 1, grid_points ≥ 2 and batch ≥ 1".into(),
            ));
        }
        if !(self.span.is_finite() && self.span > 1.0) {
            return Err(Error::Config(format!("reconstruction span {} must exceed 1", self.span)));
        }
        Ok(())
    }

    /// Coarse multipliers `span^((2k − (n−1))/(n−1))`, ascending.
    pub fn coarse_multipliers(&self) -> Vec<f64> {
        log_grid(self.span.ln(), self.grid_points)
    }

    /// Fine multipliers between the coarse neighbours of 1, ascending.
    pub fn fine_multipliers(&self) -> Vec<f64> {
        let step = 2.0 * self.span.ln() / (self.grid_points - 1) as f64;
        log_grid(step, self.grid_points)
    }
}

fn log_grid(half_width_ln: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| {
            let t = (2.0 * k as f64 - (n - 1) as f64) / (n - 1) as f64;
            if 2 * k == n - 1 {
                1.0
            } else {
                (t * half_width_ln).exp()
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub template: PlanTemplate,
    pub recon: ReconConfig,
    /// Shared-factor rule at reparameterization.
    pub select: ScaleSelect,
    /// Re-fit the layer-wise post-LayerNorm quantizers from min/max after
    /// reparameterization instead of keeping `(s̃, z̃)`.
    pub recalibrate: bool,
    /// Whether stage 3 also tunes activation quantizers.
    pub stage3_activations: bool,
    /// Feed each block the quantized model's activations instead of the
    /// full-precision ones during reconstruction.
    pub quantized_inputs: bool,
    /// Skip reparameterization and weight quantization (stage 1 only).
    pub activations_only: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            template: PlanTemplate::default(),
            recon: ReconConfig::default(),
            select: ScaleSelect::Mosf,
            recalibrate: false,
            stage3_activations: true,
            quantized_inputs: false,
            activations_only: false,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        check_bits(self.template.bits_w).map_err(|e| Error::Config(format!("bits_w: {e}")))?;
        check_bits(self.template.bits_a).map_err(|e| Error::Config(format!("bits_a: {e}")))?;
        if self.template.tan_sample < 2 {
            return Err(Error::Config("tan_sample must be at least 2".into()));
        }
        self.recon.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grids() {
        let c = ReconConfig::default();
        let coarse = c.coarse_multipliers();
        assert_eq!(coarse.len(), 33);
        assert!((coarse[0] - 0.5).abs() < 1e-15 && (coarse[32] - 2.0).abs() < 1e-15);
        assert_eq!(coarse[16], 1.0);
        assert!((coarse[17] - (1.0f64 / 16.0).exp2()).abs() < 1e-15);
        let fine = c.fine_multipliers();
        assert!((fine[0] - (-1.0f64 / 16.0).exp2()).abs() < 1e-15);
        assert!((fine[32] - (1.0f64 / 16.0).exp2()).abs() < 1e-15);
        assert!(fine.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn config_json_round_trip() {
        let c = PipelineConfig::default();
        let back: PipelineConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(PipelineConfig {
            template: PlanTemplate {
                bits_w: 1,
                ..PlanTemplate::default()
            },
            ..c
        }
        .validate()
        .is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let c: PipelineConfig = serde_json::from_str(r#"{"template": {"bits_a": 3}, "select": "repq"}"#).unwrap();
        assert_eq!(c.template.bits_a, 3);
        assert_eq!(c.template.bits_w, 4);
        assert_eq!(c.select, ScaleSelect::Repq);
        assert_eq!(c.recon, ReconConfig::default());
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"passes": 2}"#).is_err());
    }
}
