use serde::{Deserialize, Serialize};

use super::{check_bits, qmax};
use crate::error::{Error, Result};
use crate::tensor::{IntTensor, Tensor};

/// Inputs at or below this value take the top code.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogBase {
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "sqrt2")]
    Sqrt2,
}

impl LogBase {
    /// Codes per octave.
    fn steps_per_octave(self) -> f64 {
        match self {
            LogBase::Two => 1.0,
            LogBase::Sqrt2 => 2.0,
        }
    }

    pub fn value(self) -> f64 {
        match self {
            LogBase::Two => 2.0,
            LogBase::Sqrt2 => std::f64::consts::SQRT_2,
        }
    }
}

/// `q = clamp(round(−log_base(x/s)), 0, 2^b − 1)`, `x_f = s·base^(−q)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogParams {
    pub base: LogBase,
    pub scale: f64,
    pub bits: u32,
}

impl LogParams {
    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Parameter(format!(
                "log scale must be positive, got {}",
                self.scale
            )));
        }
        Ok(())
    }

    /// Transform-domain value `−log_base(x/s)` whose rounding is the code.
    pub fn transform(&self, x: f64) -> f64 {
        -(x / self.scale).log2() * self.base.steps_per_octave()
    }

    pub(crate) fn code(&self, x: f64) -> i32 {
        if x <= LOG_FLOOR {
            return qmax(self.bits);
        }
        super::round_half_even(self.transform(x))
            .clamp(0.0, qmax(self.bits) as f64) as i32
    }

    pub(crate) fn level(&self, q: i32) -> f64 {
        self.scale * (-(q as f64) / self.base.steps_per_octave()).exp2()
    }
}

/// The scale defaults to the corpus maximum so the largest value gets code 0.
pub fn log_calibrate(x: &Tensor, bits: u32, base: LogBase) -> Result<LogParams> {
    check_bits(bits)?;
    if x.min() < 0.0 {
        return Err(Error::Domain("log quantizer needs non-negative inputs".into()));
    }
    let max = x.max();
    let scale = if max > LOG_FLOOR { max } else { 1.0 };
    Ok(LogParams { base, scale, bits })
}

pub fn log_quant(x: &Tensor, p: &LogParams) -> Result<IntTensor> {
    p.validate()?;
    if let Some(v) = x.data().iter().find(|v| **v < 0.0) {
        return Err(Error::Domain(format!("negative input {v} to log quantizer")));
    }
    let data = x.data().iter().map(|&v| p.code(v)).collect();
    Ok(IntTensor::from_parts(x.shape().to_vec(), data))
}

pub fn log_dequant(q: &IntTensor, p: &LogParams) -> Result<Tensor> {
    p.validate()?;
    let data = q.data().iter().map(|&c| p.level(c)).collect();
    Ok(Tensor::from_parts(q.shape().to_vec(), data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec()).unwrap()
    }

    fn p(base: LogBase) -> LogParams {
        LogParams {
            base,
            scale: 0.8,
            bits: 4,
        }
    }

    #[test]
    fn exact_on_powers_of_the_base() {
        let lp = p(LogBase::Two);
        let q = log_quant(&t(&[0.8, 0.2]), &lp).unwrap();
        assert_eq!(q.data(), &[0, 2]);
        assert_eq!(log_dequant(&q, &lp).unwrap().data(), &[0.8, 0.2]);

        let lp = p(LogBase::Sqrt2);
        let q = log_quant(&t(&[0.4]), &lp).unwrap();
        assert_eq!(q.data(), &[2]);
        assert!((log_dequant(&q, &lp).unwrap().data()[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn zero_maps_to_top_code() {
        let q = log_quant(&t(&[0.0, 1e-12]), &p(LogBase::Two)).unwrap();
        assert_eq!(q.data(), &[15, 15]);
    }

    #[test]
    fn negative_input_rejected() {
        assert!(matches!(
            log_quant(&t(&[-0.1]), &p(LogBase::Two)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn calibration_scale_is_max() {
        let lp = log_calibrate(&t(&[0.1, 0.7, 0.3]), 3, LogBase::Two).unwrap();
        assert_eq!(lp.scale, 0.7);
        assert_eq!(log_quant(&t(&[0.7]), &lp).unwrap().data(), &[0]);
    }
}
