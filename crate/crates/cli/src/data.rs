//! Synthetic corpora and the toy-model lab setup.

use dopq_core::toyvit::{gaussian_tokens, init_weights, inject_outliers, OutlierSite, ViTConfig, ViTWeights};
use dopq_core::{Error, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Rows of `softmax(ℓ)` with logits `ℓ ~ N(0, σ²)`, shape `[rows, n]`.
pub fn softmax_rows(rows: usize, n: usize, sigma: f64, seed: u64) -> Result<Tensor> {
    if rows == 0 || n == 0 {
        return Err(Error::Parameter("softmax corpus needs rows ≥ 1 and n ≥ 1".into()));
    }
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::Parameter(format!("sigma {sigma} must be finite and ≥ 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits: Vec<f64> = (0..rows * n)
        .map(|_| sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect();
    dopq_core::toyvit::softmax(&Tensor::new(vec![rows, n], logits)?)
}

/// Gaussian channels `[rows, channels]` with log-normal per-channel scales
/// (`exp(N(0, 0.5²))`); `outliers` seeded channels are further scaled by
/// `factor`. Returns the corpus and the outlier channel indices.
pub fn postln_channels(
    rows: usize,
    channels: usize,
    outliers: usize,
    factor: f64,
    seed: u64,
) -> Result<(Tensor, Vec<usize>)> {
    if rows == 0 || channels == 0 || outliers > channels {
        return Err(Error::Parameter(format!(
            "post-LayerNorm corpus needs rows ≥ 1, channels ≥ 1 and outliers ≤ channels (got {rows}, {channels}, {outliers})"
        )));
    }
    if !(factor.is_finite() && factor > 0.0) {
        return Err(Error::Parameter(format!("outlier factor {factor} must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scale: Vec<f64> = (0..channels)
        .map(|_| (0.5 * Distribution::<f64>::sample(&StandardNormal, &mut rng)).exp())
        .collect();
    let mut picked: Vec<usize> = Vec::with_capacity(outliers);
    while picked.len() < outliers {
        let c = rng.random_range(0..channels);
        if !picked.contains(&c) {
            picked.push(c);
        }
    }
    picked.sort_unstable();
    for &c in &picked {
        scale[c] *= factor;
    }
    let data = (0..rows * channels)
        .map(|i| scale[i % channels] * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect();
    Ok((Tensor::new(vec![rows, channels], data)?, picked))
}

/// Shape and distribution summary of a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub shape: Vec<usize>,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Softmax rows only: fraction of entries below `2/N`.
    pub frac_below_two_over_n: Option<f64>,
    /// Softmax rows only: fraction of entries below 0.1.
    pub frac_below_tenth: Option<f64>,
    /// Softmax rows only: fraction of rows whose largest entry exceeds 1/2.
    pub rows_peaked: Option<f64>,
}

impl CorpusSummary {
    pub fn of(x: &Tensor, softmax: bool) -> Self {
        let len = x.len() as f64;
        let (mut below, mut tenth, mut peaked) = (None, None, None);
        if softmax {
            let n = x.last_dim();
            let rows = x.len() / n;
            let cut = 2.0 / n as f64;
            below = Some(x.data().iter().filter(|&&v| v < cut).count() as f64 / len);
            tenth = Some(x.data().iter().filter(|&&v| v < 0.1).count() as f64 / len);
            let p = x.data().chunks(n).filter(|r| r.iter().any(|&v| v > 0.5)).count();
            peaked = Some(p as f64 / rows as f64);
        }
        Self {
            shape: x.shape().to_vec(),
            min: x.min(),
            max: x.max(),
            mean: x.data().iter().sum::<f64>() / len,
            frac_below_two_over_n: below,
            frac_below_tenth: tenth,
            rows_peaked: peaked,
        }
    }
}

/// A seeded toy model with its calibration and held-out corpora.
#[derive(Debug, Clone)]
pub struct Lab {
    pub weights: ViTWeights,
    pub calib: Tensor,
    pub eval: Tensor,
    pub outliers: Vec<OutlierSite>,
}

impl Lab {
    /// Weights come from `model.seed`; the corpora and outlier channels
    /// from `seed`.
    pub fn build(model: &ViTConfig, seed: u64, calib: usize, eval: usize, outlier_factor: f64) -> Result<Self> {
        let mut weights = init_weights(model)?;
        let outliers = inject_outliers(&mut weights, outlier_factor, seed.wrapping_add(3))?;
        Ok(Self {
            calib: gaussian_tokens(model, calib, seed.wrapping_add(1))?,
            eval: gaussian_tokens(model, eval, seed.wrapping_add(2))?,
            weights,
            outliers,
        })
    }

    /// The default lab: [`ViTConfig::lab`], 256 calibration and 512
    /// held-out sequences.
    pub fn standard(seed: u64, outlier_factor: f64) -> Result<Self> {
        Self::build(&ViTConfig::lab(seed), seed, 256, 512, outlier_factor)
    }
}
