//! Fixed-point shift-add CORDIC kernels for tan and arctan.
//!
//! Angles and coordinates are `i64` values in a Q-format with
//! `fraction_bits` fractional bits. The iteration loops only add, subtract
//! and arithmetic-shift; the `arctan(2^-i)` table built once at construction
//! is the only transcendental input.

use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::quantizers::{qmax, to_code, TanParams};
use crate::tensor::{IntTensor, Tensor};

/// Distance kept from `±π/2` by [`Cordic::tan`].
pub const BRANCH_GUARD: f64 = 0.01;

/// Beyond this magnitude arctan is evaluated as `π/2 − arctan(1/y)`.
const ARCTAN_REDUCE_ABOVE: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CordicConfig {
    pub iterations: u32,
    pub fraction_bits: u32,
}

impl Default for CordicConfig {
    fn default() -> Self {
        Self {
            iterations: 30,
            fraction_bits: 32,
        }
    }
}

impl CordicConfig {
    pub fn validate(&self) -> Result<()> {
        if !(8..=48).contains(&self.iterations) {
            return Err(Error::Parameter(format!(
                "CORDIC iterations {} outside [8, 48]",
                self.iterations
            )));
        }
        if !(16..=40).contains(&self.fraction_bits) {
            return Err(Error::Parameter(format!(
                "CORDIC fraction bits {} outside [16, 40]",
                self.fraction_bits
            )));
        }
        Ok(())
    }
}

/// A configured kernel with its angle table. Immutable and shareable.
#[derive(Debug, Clone)]
pub struct Cordic {
    cfg: CordicConfig,
    table: Vec<i64>,
}

impl Cordic {
    pub fn new(cfg: CordicConfig) -> Result<Self> {
        cfg.validate()?;
        let one = (1u64 << cfg.fraction_bits) as f64;
        let table = (0..cfg.iterations)
            .map(|i| ((-(i as f64)).exp2().atan() * one).round() as i64)
            .collect();
        Ok(Self { cfg, table })
    }

    /// Builds a kernel around a caller-supplied angle table.
    pub fn with_table(cfg: CordicConfig, table: Vec<i64>) -> Result<Self> {
        cfg.validate()?;
        if table.len() != cfg.iterations as usize {
            return Err(Error::Dimension(format!(
                "angle table has {} entries for {} iterations",
                table.len(),
                cfg.iterations
            )));
        }
        Ok(Self { cfg, table })
    }

    pub fn config(&self) -> CordicConfig {
        self.cfg
    }

    /// `round(arctan(2^-i) · 2^fraction_bits)` for each iteration.
    pub fn table(&self) -> &[i64] {
        &self.table
    }

    fn to_fixed(&self, v: f64) -> i64 {
        (v * (1u64 << self.cfg.fraction_bits) as f64).round() as i64
    }

    fn fixed_to_f64(&self, v: i64) -> f64 {
        v as f64 / (1u64 << self.cfg.fraction_bits) as f64
    }

    /// Rotation mode from `(1, 0)` by `angle`; returns the gain-scaled
    /// `(cos, sin)` pair.
    pub fn rotate(&self, angle: i64) -> (i64, i64) {
        let mut x: i64 = 1 << self.cfg.fraction_bits;
        let mut y: i64 = 0;
        let mut z = angle;
        for (i, &t) in self.table.iter().enumerate() {
            let (dx, dy) = (y >> i, x >> i);
            if z >= 0 {
                x -= dx;
                y += dy;
                z -= t;
            } else {
                x += dx;
                y -= dy;
                z += t;
            }
        }
        (x, y)
    }

    /// Vectoring mode from `(1, y)`; returns the accumulated angle.
    pub fn vector(&self, y: i64) -> i64 {
        let mut x: i64 = 1 << self.cfg.fraction_bits;
        let mut y = y;
        let mut z: i64 = 0;
        for (i, &t) in self.table.iter().enumerate() {
            let (dx, dy) = (y >> i, x >> i);
            if y >= 0 {
                x += dx;
                y -= dy;
                z += t;
            } else {
                x -= dx;
                y += dy;
                z -= t;
            }
        }
        z
    }

    /// `tan(theta)` for `|theta| < π/2 − δ`.
    pub fn tan(&self, theta: f64) -> Result<f64> {
        if theta.is_nan() || theta.abs() >= FRAC_PI_2 - BRANCH_GUARD {
            return Err(Error::Domain(format!(
                "tan argument {theta} outside the guarded branch (±(π/2 − {BRANCH_GUARD}))"
            )));
        }
        if theta == 0.0 {
            return Ok(theta);
        }
        let (c, s) = self.rotate(self.to_fixed(theta.abs()));
        let t = s as f64 / c as f64;
        Ok(if theta < 0.0 { -t } else { t })
    }

    pub fn arctan(&self, y: f64) -> f64 {
        if y == 0.0 || y.is_nan() {
            return y;
        }
        if y.is_infinite() {
            return FRAC_PI_2.copysign(y);
        }
        let m = y.abs();
        let r = if m > ARCTAN_REDUCE_ABOVE {
            FRAC_PI_2 - self.fixed_to_f64(self.vector(self.to_fixed(1.0 / m)))
        } else {
            self.fixed_to_f64(self.vector(self.to_fixed(m)))
        };
        if y < 0.0 {
            -r
        } else {
            r
        }
    }
}

/// [`crate::quantizers::tanq_quant`] with the warp evaluated by the kernel.
/// Warp arguments closer than the branch guard to `±π/2` are pulled onto it.
pub fn tanq_quant_cordic(x: &Tensor, tp: &TanParams, kernel: &Cordic) -> Result<IntTensor> {
    tp.validate()?;
    let limit = FRAC_PI_2 - BRANCH_GUARD;
    let limit = limit - limit * f64::EPSILON;
    let (s, z, top) = (tp.inner.scale[0], tp.inner.zero_point[0], qmax(tp.inner.bits));
    let data = x
        .data()
        .iter()
        .map(|&v| {
            let theta = (tp.a * (v.clamp(0.0, 1.0) - tp.b_focus)).clamp(-limit, limit);
            let t = kernel.tan(theta)?;
            Ok(to_code(t / s, z, top))
        })
        .collect::<Result<_>>()?;
    Ok(IntTensor::from_parts(x.shape().to_vec(), data))
}

/// [`crate::quantizers::tanq_dequant`] with arctan evaluated by the kernel.
pub fn tanq_dequant_cordic(q: &IntTensor, tp: &TanParams, kernel: &Cordic) -> Result<Tensor> {
    tp.validate()?;
    let (s, z) = (tp.inner.scale[0], tp.inner.zero_point[0]);
    let data = q
        .data()
        .iter()
        .map(|&c| (kernel.arctan(s * (c - z) as f64) / tp.a + tp.b_focus).clamp(0.0, 1.0))
        .collect();
    Ok(Tensor::from_parts(q.shape().to_vec(), data))
}
