//! Versioned run configuration and the run-directory manifest.

use std::path::Path;

use dopq_core::pipeline::PipelineConfig;
use dopq_core::toyvit::ViTConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const RUN_SCHEMA: &str = "dopq.run/v1";

/// Version string of this build, `git describe` style.
pub const VERSION: &str = env!("DOPQ_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Must equal [`RUN_SCHEMA`].
    pub schema: String,
    pub seed: u64,
    /// Toy model; [`ViTConfig::lab`] of `seed` when absent.
    #[serde(default)]
    pub model: Option<ViTConfig>,
    #[serde(default = "default_calib")]
    pub calib_size: usize,
    #[serde(default = "default_eval")]
    pub eval_size: usize,
    /// Injected post-LayerNorm outlier factor (1 = none).
    #[serde(default = "default_factor")]
    pub outlier_factor: f64,
    #[serde(default)]
    pub pipeline: PipelineConfig,
}

fn default_calib() -> usize {
    256
}

fn default_eval() -> usize {
    512
}

fn default_factor() -> f64 {
    1.0
}

impl RunConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            schema: RUN_SCHEMA.into(),
            seed,
            model: None,
            calib_size: default_calib(),
            eval_size: default_eval(),
            outlier_factor: default_factor(),
            pipeline: PipelineConfig::default(),
        }
    }

    pub fn model(&self) -> ViTConfig {
        self.model.clone().unwrap_or_else(|| ViTConfig::lab(self.seed))
    }

    /// Parses and validates a configuration document. Errors name the
    /// offending field and, for syntax and type errors, its line.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| CliError::Usage(format!("config field `{field}`: {why}"));
        if self.schema != RUN_SCHEMA {
            return Err(bad("schema", format!("expected \"{RUN_SCHEMA}\", got \"{}\"", self.schema)));
        }
        if self.calib_size == 0 {
            return Err(bad("calib_size", "must be at least 1".into()));
        }
        if self.eval_size == 0 {
            return Err(bad("eval_size", "must be at least 1".into()));
        }
        if !(self.outlier_factor.is_finite() && self.outlier_factor > 0.0) {
            return Err(bad("outlier_factor", format!("{} must be positive", self.outlier_factor)));
        }
        self.model().validate().map_err(|e| bad("model", e.to_string()))?;
        self.pipeline.validate().map_err(|e| bad("pipeline", e.to_string()))
    }
}

/// Records what produced a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub seed: u64,
    pub config_path: Option<String>,
    pub out_dir: String,
    pub version: String,
}

impl RunManifest {
    pub fn new(subcommand: &str, seed: u64, config_path: Option<&Path>, out_dir: &Path) -> Self {
        Self {
            subcommand: subcommand.into(),
            seed,
            config_path: config_path.map(|p| p.display().to_string()),
            out_dir: out_dir.display().to_string(),
            version: VERSION.into(),
        }
    }
}
