//! Quantizer suite: uniform, logarithmic (base 2 and base √2),
//! shift-uniform-log2 and the tan quantizer.
//!
//! All quantizers round half to even and emit codes in `[0, 2^b − 1]`.

mod config;
mod log;
mod sulq;
mod tan;
mod uniform;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{IntTensor, Tensor};

pub use config::QuantizerConfig;
pub use log::{log_calibrate, log_dequant, log_quant, LogBase, LogParams, LOG_FLOOR};
pub use sulq::{
    sulq_calibrate, sulq_calibrate_with_eta, sulq_dequant, sulq_quant, SulqParams, ETA_CANDIDATES,
};
pub use tan::{
    tan_feasible, tan_transform, tanq_dequant, tanq_dequant_literal, tanq_grid_search,
    tanq_quant, tanq_quant_counted, tanq_mse, SearchGrid, TanParams, TanSearch,
};
pub use uniform::{uq_calibrate, uq_dequant, uq_quant};

/// Whether one (scale, zero point) pair covers the whole tensor or one pair
/// is kept per index of `axis`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Granularity {
    LayerWise,
    ChannelWise { axis: usize },
}

/// Affine quantization parameters: `q = clamp(round(x/s) + z, 0, 2^b − 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    pub bits: u32,
    pub scale: Vec<f64>,
    pub zero_point: Vec<i32>,
    pub granularity: Granularity,
}

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 31;

/// Largest code for a bit-width.
pub fn qmax(bits: u32) -> i32 {
    ((1u64 << bits) - 1) as i32
}

pub(crate) fn check_bits(bits: u32) -> Result<()> {
    if !(MIN_BITS..=MAX_BITS).contains(&bits) {
        return Err(Error::Parameter(format!(
            "bit-width {bits} outside [{MIN_BITS}, {MAX_BITS}]"
        )));
    }
    Ok(())
}

/// Round half to even. Same result as `f64::round_ties_even`, but without
/// the libm call on targets lacking a rounding instruction: adding and
/// subtracting 2^52 rounds under the default nearest-even mode.
#[inline]
pub(crate) fn round_half_even(v: f64) -> f64 {
    const TWO_52: f64 = 4_503_599_627_370_496.0;
    let a = v.abs();
    if a < TWO_52 {
        ((a + TWO_52) - TWO_52).copysign(v)
    } else {
        v
    }
}

/// Rounds, shifts by the zero point and clamps to the code range.
#[inline]
pub(crate) fn to_code(v: f64, zero_point: i32, qmax: i32) -> i32 {
    (round_half_even(v) + zero_point as f64).max(0.0).min(qmax as f64) as i32
}

/// `to_code(v, z, qmax) − z` as a float, without the integer round trip.
#[inline]
pub(crate) fn offset_code(v: f64, zero_point: i32, qmax: i32) -> f64 {
    let z = zero_point as f64;
    (round_half_even(v) + z).max(0.0).min(qmax as f64) - z + 0.0
}

impl QuantParams {
    pub fn layer_wise(bits: u32, scale: f64, zero_point: i32) -> Result<Self> {
        let p = Self {
            bits,
            scale: vec![scale],
            zero_point: vec![zero_point],
            granularity: Granularity::LayerWise,
        };
        p.validate()?;
        Ok(p)
    }

    /// Min/max calibration of one channel:
    /// `s = (max − min)/(2^b − 1)`, `z = clamp(round(−min/s))`, with
    /// `s = 1` when the range is degenerate.
    pub fn channel_from_range(min: f64, max: f64, bits: u32) -> (f64, i32) {
        let top = qmax(bits);
        if max > min {
            let s = (max - min) / top as f64;
            let z = (-min / s).round_ties_even().clamp(0.0, top as f64) as i32;
            (s, z)
        } else {
            (1.0, (-min).round_ties_even().clamp(0.0, top as f64) as i32)
        }
    }

    pub fn from_range(min: f64, max: f64, bits: u32) -> Result<Self> {
        check_bits(bits)?;
        let (s, z) = Self::channel_from_range(min, max, bits);
        Self::layer_wise(bits, s, z)
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        if self.scale.is_empty() || self.scale.len() != self.zero_point.len() {
            return Err(Error::Parameter(format!(
                "{} scales vs {} zero points",
                self.scale.len(),
                self.zero_point.len()
            )));
        }
        if matches!(self.granularity, Granularity::LayerWise) && self.scale.len() != 1 {
            return Err(Error::Parameter(
                "layer-wise parameters must hold exactly one scale".into(),
            ));
        }
        if let Some(s) = self.scale.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Parameter(format!("scale must be positive, got {s}")));
        }
        let top = qmax(self.bits);
        if let Some(z) = self.zero_point.iter().find(|z| !(0..=top).contains(*z)) {
            return Err(Error::Parameter(format!(
                "zero point {z} outside [0, {top}]"
            )));
        }
        Ok(())
    }

    /// Validates against the tensor the parameters are about to be applied to
    /// and returns `(channels, stride)` for index → channel lookup.
    pub(crate) fn layout_for(&self, shape: &[usize]) -> Result<(usize, usize)> {
        self.validate()?;
        match self.granularity {
            Granularity::LayerWise => Ok((1, 1)),
            Granularity::ChannelWise { axis } => {
                if axis >= shape.len() || shape[axis] != self.scale.len() {
                    return Err(Error::Dimension(format!(
                        "{} channel parameters do not fit axis {axis} of {shape:?}",
                        self.scale.len()
                    )));
                }
                Ok((shape[axis], crate::tensor::axis_stride(shape, axis)))
            }
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.len()
    }

    pub fn is_channel_wise(&self) -> bool {
        matches!(self.granularity, Granularity::ChannelWise { .. })
    }

    /// Copy with every scale multiplied by `factor`; zero points unchanged.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut p = self.clone();
        p.scale.iter_mut().for_each(|s| *s *= factor);
        p
    }
}

/// A calibrated quantizer of any supported family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QuantizerConfig", into = "QuantizerConfig")]
pub enum Quantizer {
    Uniform(QuantParams),
    Log(LogParams),
    Sulq(SulqParams),
    Tan(TanParams),
}

impl Quantizer {
    pub fn bits(&self) -> u32 {
        match self {
            Quantizer::Uniform(p) => p.bits,
            Quantizer::Log(p) => p.bits,
            Quantizer::Sulq(p) => p.inner.bits,
            Quantizer::Tan(p) => p.inner.bits,
        }
    }

    pub fn quant(&self, x: &Tensor) -> Result<IntTensor> {
        match self {
            Quantizer::Uniform(p) => uq_quant(x, p),
            Quantizer::Log(p) => log_quant(x, p),
            Quantizer::Sulq(p) => sulq_quant(x, p),
            Quantizer::Tan(p) => tanq_quant(x, p),
        }
    }

    pub fn dequant(&self, q: &IntTensor) -> Result<Tensor> {
        match self {
            Quantizer::Uniform(p) => uq_dequant(q, p),
            Quantizer::Log(p) => log_dequant(q, p),
            Quantizer::Sulq(p) => sulq_dequant(q, p),
            Quantizer::Tan(p) => tanq_dequant(q, p),
        }
    }

    /// `dequant(quant(x))`, shape-preserving.
    pub fn fake_quant(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Quantizer::Uniform(p) => uniform::fake_quant(x, p),
            _ => {
                let q = self.quant(x)?;
                // Non-uniform dequantization only depends on the code, so a
                // table over the code range replaces per-element transcendentals.
                if self.bits() <= 16 && x.len() > 4 << self.bits() {
                    let top = qmax(self.bits());
                    let codes = IntTensor::from_parts(vec![top as usize + 1], (0..=top).collect());
                    let table = self.dequant(&codes)?.into_data();
                    let data = q.data().iter().map(|&c| table[c as usize]).collect();
                    Ok(Tensor::from_parts(q.shape().to_vec(), data))
                } else {
                    self.dequant(&q)
                }
            }
        }
    }

    /// Copy with the quantizer's scale (the inner uniform scale for warped
    /// families) multiplied by `factor`.
    pub fn with_scale_factor(&self, factor: f64) -> Self {
        match self {
            Quantizer::Uniform(p) => Quantizer::Uniform(p.scaled(factor)),
            Quantizer::Log(p) => Quantizer::Log(LogParams {
                scale: p.scale * factor,
                ..p.clone()
            }),
            Quantizer::Sulq(p) => Quantizer::Sulq(SulqParams {
                eta: p.eta,
                inner: p.inner.scaled(factor),
            }),
            Quantizer::Tan(p) => Quantizer::Tan(TanParams {
                inner: p.inner.scaled(factor),
                ..p.clone()
            }),
        }
    }

    pub fn kind(&self) -> QuantizerKind {
        match self {
            Quantizer::Uniform(_) => QuantizerKind::Uniform,
            Quantizer::Log(p) => match p.base {
                LogBase::Two => QuantizerKind::Log2,
                LogBase::Sqrt2 => QuantizerKind::LogSqrt2,
            },
            Quantizer::Sulq(_) => QuantizerKind::Sulq,
            Quantizer::Tan(_) => QuantizerKind::Tan,
        }
    }
}

/// `dequant(quant(x))` under the chosen quantizer.
pub fn fake_quant(x: &Tensor, q: &Quantizer) -> Result<Tensor> {
    q.fake_quant(x)
}

/// Quantizer family selector used by calibration and the experiment drivers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantizerKind {
    #[serde(rename = "uq")]
    Uniform,
    Log2,
    #[serde(rename = "logsqrt2")]
    LogSqrt2,
    Sulq,
    #[serde(rename = "tanq")]
    Tan,
}

impl QuantizerKind {
    pub const ALL: [QuantizerKind; 5] = [
        QuantizerKind::Uniform,
        QuantizerKind::Log2,
        QuantizerKind::LogSqrt2,
        QuantizerKind::Sulq,
        QuantizerKind::Tan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QuantizerKind::Uniform => "uq",
            QuantizerKind::Log2 => "log2",
            QuantizerKind::LogSqrt2 => "logsqrt2",
            QuantizerKind::Sulq => "sulq",
            QuantizerKind::Tan => "tanq",
        }
    }

    /// Calibrates a layer-wise quantizer of this family on `x`.
    pub fn calibrate(self, x: &Tensor, bits: u32, grid: &SearchGrid) -> Result<Quantizer> {
        Ok(match self {
            QuantizerKind::Uniform => Quantizer::Uniform(uq_calibrate(x, bits, Granularity::LayerWise)?),
            QuantizerKind::Log2 => Quantizer::Log(log_calibrate(x, bits, LogBase::Two)?),
            QuantizerKind::LogSqrt2 => Quantizer::Log(log_calibrate(x, bits, LogBase::Sqrt2)?),
            QuantizerKind::Sulq => Quantizer::Sulq(sulq_calibrate(x, bits)?),
            QuantizerKind::Tan => Quantizer::Tan(tanq_grid_search(x, bits, grid)?.params),
        })
    }
}

impl fmt::Display for QuantizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QuantizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uq" | "uniform" => Ok(QuantizerKind::Uniform),
            "log2" | "logq" => Ok(QuantizerKind::Log2),
            "logsqrt2" | "log-sqrt2" => Ok(QuantizerKind::LogSqrt2),
            "sulq" => Ok(QuantizerKind::Sulq),
            "tanq" | "tan" => Ok(QuantizerKind::Tan),
            other => Err(Error::Config(format!(
                "unknown quantizer '{other}' (expected uq, log2, logsqrt2, sulq or tanq)"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_half_even_matches_std() {
        let edge = [
            0.0, -0.0, 0.5, -0.5, 1.5, 2.5, -2.5, 0.49999999999999994, 4503599627370495.5,
            4503599627370496.0, 1e300, -1e-300, f64::INFINITY, f64::NEG_INFINITY,
        ];
        for v in edge {
            assert_eq!(round_half_even(v).to_bits(), v.round_ties_even().to_bits(), "{v}");
        }
        assert!(round_half_even(f64::NAN).is_nan());
        let mut x = 0.123_f64;
        for _ in 0..100_000 {
            x = (x * 9301.0 + 0.49).fract() * 2e3 - 1e3;
            assert_eq!(round_half_even(x).to_bits(), x.round_ties_even().to_bits(), "{x}");
        }
    }

    #[test]
    fn params_validation() {
        assert!(QuantParams::layer_wise(4, 1.0, 0).is_ok());
        assert!(QuantParams::layer_wise(1, 1.0, 0).is_err());
        assert!(QuantParams::layer_wise(4, 0.0, 0).is_err());
        assert!(QuantParams::layer_wise(4, 1.0, 16).is_err());
        let p = QuantParams {
            bits: 4,
            scale: vec![1.0, 2.0],
            zero_point: vec![0, 1],
            granularity: Granularity::ChannelWise { axis: 1 },
        };
        assert!(p.layout_for(&[3, 2]).is_ok());
        assert!(p.layout_for(&[3, 3]).is_err());
    }

    #[test]
    fn kind_parsing() {
        for k in QuantizerKind::ALL {
            assert_eq!(k.name().parse::<QuantizerKind>().unwrap(), k);
        }
        assert!("nope".parse::<QuantizerKind>().is_err());
    }
}
