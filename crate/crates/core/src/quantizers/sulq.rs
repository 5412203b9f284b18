use super::uniform::{uq_calibrate, uq_dequant, uq_quant};
use super::{check_bits, qmax, to_code, Granularity, QuantParams};
use crate::error::{Error, Result};
use crate::tensor::{IntTensor, Tensor};

/// Offsets tried by [`sulq_calibrate`]: `2^-k` for `k = 1..=14`.
pub const ETA_CANDIDATES: std::ops::RangeInclusive<i32> = 1..=14;

/// Shift-uniform-log2: uniform quantization of `−log2(x + η)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SulqParams {
    pub eta: f64,
    pub inner: QuantParams,
}

impl SulqParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::Parameter(format!("eta must be positive, got {}", self.eta)));
        }
        self.inner.validate()?;
        if self.inner.is_channel_wise() {
            return Err(Error::Parameter("SULQ inner grid is layer-wise".into()));
        }
        Ok(())
    }

    pub fn transform(&self, x: f64) -> f64 {
        -(x + self.eta).log2()
    }

    fn inverse(&self, t: f64) -> f64 {
        ((-t).exp2() - self.eta).max(0.0)
    }
}

fn check_non_negative(x: &Tensor) -> Result<()> {
    match x.data().iter().find(|v| **v < 0.0) {
        Some(v) => Err(Error::Domain(format!("negative input {v} to SULQ"))),
        None => Ok(()),
    }
}

fn transformed(x: &Tensor, eta: f64) -> Tensor {
    x.map(|v| -(v + eta).log2())
}

pub fn sulq_calibrate_with_eta(x: &Tensor, bits: u32, eta: f64) -> Result<SulqParams> {
    check_bits(bits)?;
    check_non_negative(x)?;
    let p = SulqParams {
        eta,
        inner: uq_calibrate(&transformed(x, eta), bits, Granularity::LayerWise)?,
    };
    p.validate()?;
    Ok(p)
}

fn corpus_mse(x: &Tensor, p: &SulqParams) -> f64 {
    let (s, z) = (p.inner.scale[0], p.inner.zero_point[0]);
    let top = qmax(p.inner.bits);
    let sum: f64 = x
        .data()
        .iter()
        .map(|&v| {
            let q = to_code(p.transform(v) / s, z, top);
            let back = p.inverse(s * (q - z) as f64);
            (back - v) * (back - v)
        })
        .sum();
    sum / x.len() as f64
}

/// Picks η from [`ETA_CANDIDATES`] by corpus MSE; the first minimum wins.
pub fn sulq_calibrate(x: &Tensor, bits: u32) -> Result<SulqParams> {
    let mut best: Option<(f64, SulqParams)> = None;
    for k in ETA_CANDIDATES {
        let p = sulq_calibrate_with_eta(x, bits, (-k as f64).exp2())?;
        let mse = corpus_mse(x, &p);
        if best.as_ref().is_none_or(|(m, _)| mse < *m) {
            best = Some((mse, p));
        }
    }
    Ok(best.expect("candidate set is nonempty").1)
}

pub fn sulq_quant(x: &Tensor, p: &SulqParams) -> Result<IntTensor> {
    p.validate()?;
    check_non_negative(x)?;
    uq_quant(&transformed(x, p.eta), &p.inner)
}

/// `max(2^(−D-UQ(q)) − η, 0)`.
pub fn sulq_dequant(q: &IntTensor, p: &SulqParams) -> Result<Tensor> {
    p.validate()?;
    Ok(uq_dequant(q, &p.inner)?.map(|t| p.inverse(t)))
}
