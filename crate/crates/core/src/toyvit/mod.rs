//! Desk-scale ViT encoder: pre-norm blocks of multi-head self-attention and
//! a GELU MLP with residual connections, mean pooling and a linear head.
//!
//! Inputs are token sequences `[B, N, D]`; there is no patch embedding.
//! Every matrix-multiply input and weight is a fake-quant site (see
//! [`Site`]); LayerNorm and Softmax themselves always run in full precision.

mod forward;
mod io;
mod plan;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reparam::{LayerNormAffine, LinearLayer};
use crate::tensor::Tensor;

pub use forward::{
    block_forward, collect_block_inputs, gelu, layernorm, layernorm_normalized, mlp_forward,
    model_forward, msa_forward, softmax, BlockTrace, Step,
};
pub use io::{load_weights, save_weights, WeightsManifest};
pub use plan::{BlockPlan, QuantPlan, Site};

/// LayerNorm variance floor.
pub const LN_EPS: f64 = 1e-6;

/// How initial weights are scaled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScale {
    /// Every weight drawn from `N(0, std²)`.
    Fixed(f64),
    /// `N(0, 1/fan_in)`, which keeps activations at unit scale through
    /// every linear layer.
    FanIn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub layers: usize,
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub classes: usize,
    pub seed: u64,
    pub init: InitScale,
    /// Extra gain on the query and key projections. Attention logits have
    /// standard deviation ≈ `qk_gain²` under fan-in init.
    pub qk_gain: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            tokens: 16,
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
            classes: 10,
            seed: 0,
            init: InitScale::Fixed(0.02),
            qk_gain: 1.0,
        }
    }
}

impl ViTConfig {
    /// Default shapes with fan-in init and attention logits of standard
    /// deviation ≈ 3, so attention maps are peaked the way trained ViTs'
    /// are (a 0.02 init gives near-uniform attention at this width).
    pub fn lab(seed: u64) -> Self {
        Self {
            seed,
            init: InitScale::FanIn,
            qk_gain: 3f64.sqrt(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("layers", self.layers),
            ("tokens", self.tokens),
            ("dim", self.dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("classes", self.classes),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model dimension '{name}' must be at least 1")));
        }
        if self.dim < 2 {
            return Err(Error::Config("LayerNorm needs dim ≥ 2".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        let std_ok = match self.init {
            InitScale::Fixed(s) => s.is_finite() && s >= 0.0,
            InitScale::FanIn => true,
        };
        if !std_ok || !(self.qk_gain.is_finite() && self.qk_gain > 0.0) {
            return Err(Error::Config("init std must be ≥ 0 and qk_gain > 0".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    fn std_for(&self, fan_in: usize) -> f64 {
        match self.init {
            InitScale::Fixed(s) => s,
            InitScale::FanIn => 1.0 / (fan_in as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ln1: LayerNormAffine,
    /// `[D, 3D]`, columns ordered Q | K | V with heads contiguous inside each.
    pub qkv: LinearLayer,
    pub proj: LinearLayer,
    pub ln2: LayerNormAffine,
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViTWeights {
    pub config: ViTConfig,
    pub blocks: Vec<BlockWeights>,
    pub head: LinearLayer,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Result<LinearLayer> {
    let data = if std > 0.0 {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Parameter(e.to_string()))?;
        (0..rows * cols).map(|_| normal.sample(rng)).collect()
    } else {
        vec![0.0; rows * cols]
    };
    LinearLayer::new(Tensor::new(vec![rows, cols], data)?, vec![0.0; cols])
}

/// Seeded Gaussian weights, zero biases, identity LayerNorm affines.
pub fn init_weights(cfg: &ViTConfig) -> Result<ViTWeights> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (d, hid) = (cfg.dim, cfg.hidden());
    let mut blocks = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        let mut qkv = gaussian(&mut rng, d, 3 * d, cfg.std_for(d))?;
        if cfg.qk_gain != 1.0 {
            let w = qkv.weight.data_mut();
            for row in w.chunks_mut(3 * d) {
                row[..2 * d].iter_mut().for_each(|v| *v *= cfg.qk_gain);
            }
        }
        blocks.push(BlockWeights {
            ln1: LayerNormAffine::identity(d),
            qkv,
            proj: gaussian(&mut rng, d, d, cfg.std_for(d))?,
            ln2: LayerNormAffine::identity(d),
            fc1: gaussian(&mut rng, d, hid, cfg.std_for(d))?,
            fc2: gaussian(&mut rng, hid, d, cfg.std_for(hid))?,
        });
    }
    let head = gaussian(&mut rng, d, cfg.classes, cfg.std_for(d))?;
    Ok(ViTWeights {
        config: cfg.clone(),
        blocks,
        head,
    })
}

/// Which LayerNorm of a block an outlier channel is injected into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormSite {
    Ln1,
    Ln2,
}

/// Scales `γ` and `β` of `channel` in the chosen LayerNorm by `factor` and
/// divides the matching input row of the following linear layer by it.
/// The full-precision function is unchanged; the channel's activations,
/// and therefore its quantization scale, grow by `factor`.
pub fn inject_outlier(
    w: &mut ViTWeights,
    block: usize,
    site: NormSite,
    channel: usize,
    factor: f64,
) -> Result<()> {
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::Parameter(format!("outlier factor {factor} must be positive")));
    }
    let d = w.config.dim;
    let b = w
        .blocks
        .get_mut(block)
        .ok_or_else(|| Error::Parameter(format!("no block {block}")))?;
    if channel >= d {
        return Err(Error::Parameter(format!("channel {channel} ≥ dim {d}")));
    }
    let (ln, next) = match site {
        NormSite::Ln1 => (&mut b.ln1, &mut b.qkv),
        NormSite::Ln2 => (&mut b.ln2, &mut b.fc1),
    };
    ln.gamma[channel] *= factor;
    ln.beta[channel] *= factor;
    let out = next.out_dim();
    next.weight.data_mut()[channel * out..(channel + 1) * out]
        .iter_mut()
        .for_each(|v| *v /= factor);
    Ok(())
}

/// One injected outlier channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierSite {
    pub block: usize,
    pub site: NormSite,
    pub channel: usize,
    pub factor: f64,
}

/// Injects one seeded outlier channel into both LayerNorms of every block.
/// A factor of 1 leaves the weights untouched.
pub fn inject_outliers(w: &mut ViTWeights, factor: f64, seed: u64) -> Result<Vec<OutlierSite>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sites = Vec::new();
    for block in 0..w.blocks.len() {
        for site in [NormSite::Ln1, NormSite::Ln2] {
            let channel = rng.random_range(0..w.config.dim);
            inject_outlier(w, block, site, channel, factor)?;
            sites.push(OutlierSite {
                block,
                site,
                channel,
                factor,
            });
        }
    }
    Ok(sites)
}

/// Seeded `N(0, 1)` token sequences `[count, N, D]`.
pub fn gaussian_tokens(cfg: &ViTConfig, count: usize, seed: u64) -> Result<Tensor> {
    if count == 0 {
        return Err(Error::Domain("empty token corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let n = count * cfg.tokens * cfg.dim;
    Tensor::new(
        vec![count, cfg.tokens, cfg.dim],
        (0..n).map(|_| normal.sample(&mut rng)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ViTConfig::default().validate().is_ok());
        let bad = ViTConfig {
            heads: 5,
            ..ViTConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ViTConfig {
            layers: 0,
            ..ViTConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn init_is_seeded() {
        let a = init_weights(&ViTConfig::default()).unwrap();
        let b = init_weights(&ViTConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = init_weights(&ViTConfig {
            seed: 1,
            ..ViTConfig::default()
        })
        .unwrap();
        assert!(a.blocks[0].qkv.weight.max_abs_diff(&c.blocks[0].qkv.weight).unwrap() > 0.0);
    }

    #[test]
    fn init_std_close_to_target() {
        let w = init_weights(&ViTConfig::default()).unwrap();
        let all: Vec<f64> = w
            .blocks
            .iter()
            .flat_map(|b| {
                [&b.qkv, &b.proj, &b.fc1, &b.fc2]
                    .into_iter()
                    .flat_map(|l| l.weight.data().to_vec())
            })
            .collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let std = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 0.02).abs() <= 0.002, "{std}");
        assert!(w.blocks[0].ln1.gamma.iter().all(|&g| g == 1.0));
        assert!(w.blocks[0].ln1.beta.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn outlier_injection_preserves_function() {
        let cfg = ViTConfig::lab(3);
        let w = init_weights(&cfg).unwrap();
        let mut w2 = w.clone();
        inject_outlier(&mut w2, 0, NormSite::Ln1, 5, 50.0).unwrap();
        inject_outlier(&mut w2, 1, NormSite::Ln2, 9, 50.0).unwrap();
        assert_eq!(w2.blocks[0].ln1.gamma[5], 50.0);
        let x = gaussian_tokens(&cfg, 4, 11).unwrap();
        let a = model_forward(&x, &w, None).unwrap();
        let b = model_forward(&x, &w2, None).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-9 * a.max_abs());
    }

    #[test]
    fn seeded_outliers() {
        let cfg = ViTConfig::lab(3);
        let w = init_weights(&cfg).unwrap();
        let mut same = w.clone();
        let sites = inject_outliers(&mut same, 1.0, 4).unwrap();
        assert_eq!(same, w);
        assert_eq!(sites.len(), 2 * cfg.layers);
        let (mut a, mut b) = (w.clone(), w.clone());
        assert_eq!(inject_outliers(&mut a, 50.0, 4).unwrap(), inject_outliers(&mut b, 50.0, 4).unwrap());
        assert_eq!(a, b);
        for s in &sites {
            let ln = match s.site {
                NormSite::Ln1 => &a.blocks[s.block].ln1,
                NormSite::Ln2 => &a.blocks[s.block].ln2,
            };
            assert_eq!(ln.gamma[s.channel], 50.0);
        }
    }
}
