use serde::{Deserialize, Serialize};

use super::{
    Granularity, LogBase, LogParams, QuantParams, Quantizer, QuantizerKind, SulqParams, TanParams,
};
use crate::error::{Error, Result};

/// Flat, serializable form of a calibrated [`Quantizer`].
///
/// `s`/`z` hold the uniform (or inner uniform) grid; the log family keeps its
/// scale in `s[0]` and has no zero point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerConfig {
    pub kind: QuantizerKind,
    pub bitwidth: u32,
    #[serde(default = "layer_wise")]
    pub granularity: Granularity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_focus: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    pub s: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub z: Vec<i32>,
}

fn layer_wise() -> Granularity {
    Granularity::LayerWise
}

fn missing(kind: QuantizerKind, field: &str) -> Error {
    Error::Config(format!("quantizer '{kind}' needs field '{field}'"))
}

impl From<Quantizer> for QuantizerConfig {
    fn from(q: Quantizer) -> Self {
        let kind = q.kind();
        let base = Self {
            kind,
            bitwidth: q.bits(),
            granularity: Granularity::LayerWise,
            a: None,
            b_focus: None,
            eta: None,
            s: Vec::new(),
            z: Vec::new(),
        };
        match q {
            Quantizer::Uniform(p) => Self {
                granularity: p.granularity,
                s: p.scale,
                z: p.zero_point,
                ..base
            },
            Quantizer::Log(p) => Self {
                s: vec![p.scale],
                ..base
            },
            Quantizer::Sulq(p) => Self {
                eta: Some(p.eta),
                s: p.inner.scale,
                z: p.inner.zero_point,
                ..base
            },
            Quantizer::Tan(p) => Self {
                a: Some(p.a),
                b_focus: Some(p.b_focus),
                s: p.inner.scale,
                z: p.inner.zero_point,
                ..base
            },
        }
    }
}

impl TryFrom<QuantizerConfig> for Quantizer {
    type Error = Error;

    fn try_from(c: QuantizerConfig) -> Result<Self> {
        let inner = |c: &QuantizerConfig| -> Result<QuantParams> {
            let p = QuantParams {
                bits: c.bitwidth,
                scale: c.s.clone(),
                zero_point: c.z.clone(),
                granularity: c.granularity,
            };
            p.validate()?;
            Ok(p)
        };
        let q = match c.kind {
            QuantizerKind::Uniform => Quantizer::Uniform(inner(&c)?),
            QuantizerKind::Log2 | QuantizerKind::LogSqrt2 => {
                if c.s.len() != 1 {
                    return Err(Error::Config("log quantizer needs exactly one scale".into()));
                }
                let p = LogParams {
                    base: if c.kind == QuantizerKind::Log2 {
                        LogBase::Two
                    } else {
                        LogBase::Sqrt2
                    },
                    scale: c.s[0],
                    bits: c.bitwidth,
                };
                p.validate()?;
                Quantizer::Log(p)
            }
            QuantizerKind::Sulq => {
                let p = SulqParams {
                    eta: c.eta.ok_or_else(|| missing(c.kind, "eta"))?,
                    inner: inner(&c)?,
                };
                p.validate()?;
                Quantizer::Sulq(p)
            }
            QuantizerKind::Tan => Quantizer::Tan(TanParams::new(
                c.a.ok_or_else(|| missing(c.kind, "a"))?,
                c.b_focus.ok_or_else(|| missing(c.kind, "b_focus"))?,
                inner(&c)?,
            )?),
        };
        Ok(q)
    }
}
