//! Tan quantizer.
//!
//! Values in `[0, 1]` are warped by `t = tan(a·(x − b))` and the warped
//! values are quantized on a uniform grid. The warp is steep near both ends of
//! the unit interval, so the grid spends its codes on the crowd of values near
//! 0 as well as on the rare values near 1. Dequantization inverts the warp:
//! `x_f = arctan(s·(q − z))/a + b`.
//!
//! `(a, b)` must keep `a·(x − b)` inside `(−π/2, π/2)` for all `x ∈ [0, 1]`,
//! i.e. `b + π/(2a) > 1` and `b − π/(2a) < 0`.

use std::f64::consts::FRAC_PI_2;

use rayon::prelude::*;

use super::{check_bits, qmax, to_code, QuantParams};
use crate::error::{Error, Result};
use crate::tensor::{IntTensor, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TanParams {
    /// Curvature of the warp.
    pub a: f64,
    /// Focus point: the input that maps to the zero point.
    pub b_focus: f64,
    /// Uniform grid in the warped domain (layer-wise).
    pub inner: QuantParams,
}

/// The feasibility block on `(a, b)`.
pub fn tan_feasible(a: f64, b_focus: f64) -> bool {
    a.is_finite()
        && a > 0.0
        && b_focus > 0.0
        && b_focus < 1.0
        && b_focus + FRAC_PI_2 / a > 1.0
        && b_focus - FRAC_PI_2 / a < 0.0
}

pub fn tan_transform(x: f64, a: f64, b_focus: f64) -> f64 {
    (a * (x - b_focus)).tan()
}

impl TanParams {
    pub fn new(a: f64, b_focus: f64, inner: QuantParams) -> Result<Self> {
        let p = Self { a, b_focus, inner };
        p.validate()?;
        Ok(p)
    }

    /// Inner grid calibrated on the warped image of `[x_min, x_max]`.
    pub fn from_range(a: f64, b_focus: f64, x_min: f64, x_max: f64, bits: u32) -> Result<Self> {
        check_feasible(a, b_focus)?;
        let lo = tan_transform(x_min.clamp(0.0, 1.0), a, b_focus);
        let hi = tan_transform(x_max.clamp(0.0, 1.0), a, b_focus);
        Self::new(a, b_focus, QuantParams::from_range(lo, hi, bits)?)
    }

    pub fn calibrate(x: &Tensor, a: f64, b_focus: f64, bits: u32) -> Result<Self> {
        Self::from_range(a, b_focus, x.min(), x.max(), bits)
    }

    pub fn validate(&self) -> Result<()> {
        check_feasible(self.a, self.b_focus)?;
        self.inner.validate()?;
        if self.inner.is_channel_wise() {
            return Err(Error::Parameter("tan quantizer inner grid is layer-wise".into()));
        }
        Ok(())
    }

    pub fn transform(&self, x: f64) -> f64 {
        tan_transform(x, self.a, self.b_focus)
    }

    #[inline]
    pub(crate) fn code(&self, x: f64) -> i32 {
        let t = self.transform(x.clamp(0.0, 1.0));
        to_code(t / self.inner.scale[0], self.inner.zero_point[0], qmax(self.inner.bits))
    }

    #[inline]
    pub(crate) fn level(&self, q: i32) -> f64 {
        let t = self.inner.scale[0] * (q - self.inner.zero_point[0]) as f64;
        (t.atan() / self.a + self.b_focus).clamp(0.0, 1.0)
    }

    fn level_literal(&self, q: i32) -> f64 {
        let t = (self.inner.scale[0] * (q - self.inner.zero_point[0]) as f64).round_ties_even();
        (t.atan() / self.a + self.b_focus).clamp(0.0, 1.0)
    }

    /// Dequantized value of every code, indexed by code.
    pub fn levels(&self) -> Vec<f64> {
        (0..=qmax(self.inner.bits)).map(|q| self.level(q)).collect()
    }
}

fn check_feasible(a: f64, b_focus: f64) -> Result<()> {
    if tan_feasible(a, b_focus) {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "tan quantizer parameters a={a}, b={b_focus} violate b + π/(2a) > 1, b − π/(2a) < 0, 0 < b < 1"
        )))
    }
}

/// Quantizes and reports how many inputs fell outside `[0, 1]` and were clamped.
pub fn tanq_quant_counted(x: &Tensor, tp: &TanParams) -> Result<(IntTensor, usize)> {
    tp.validate()?;
    let clamped = x.data().iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
    let data = x.data().iter().map(|&v| tp.code(v)).collect();
    Ok((IntTensor::from_parts(x.shape().to_vec(), data), clamped))
}

pub fn tanq_quant(x: &Tensor, tp: &TanParams) -> Result<IntTensor> {
    let (codes, clamped) = tanq_quant_counted(x, tp)?;
    if clamped > 0 {
        log::warn!("tan quantizer clamped {clamped} inputs outside [0, 1]");
    }
    Ok(codes)
}

/// `arctan(s·(q − z))/a + b`, clamped to `[0, 1]`.
pub fn tanq_dequant(q: &IntTensor, tp: &TanParams) -> Result<Tensor> {
    tp.validate()?;
    let data = q.data().iter().map(|&c| tp.level(c)).collect();
    Ok(Tensor::from_parts(q.shape().to_vec(), data))
}

/// Dequantization with the warped value rounded before the arctangent.
/// Kept for comparison only: it collapses every code whose warped value is
/// below 1/2 in magnitude onto `b`.
pub fn tanq_dequant_literal(q: &IntTensor, tp: &TanParams) -> Result<Tensor> {
    tp.validate()?;
    let data = q.data().iter().map(|&c| tp.level_literal(c)).collect();
    Ok(Tensor::from_parts(q.shape().to_vec(), data))
}

/// Mean squared reconstruction error of `dequant(quant(x))`.
pub fn tanq_mse(x: &[f64], tp: &TanParams) -> f64 {
    let sum: f64 = if tp.inner.bits <= 16 {
        let table = tp.levels();
        x.iter()
            .map(|&v| {
                let d = table[tp.code(v) as usize] - v;
                d * d
            })
            .sum()
    } else {
        x.iter()
            .map(|&v| {
                let d = tp.level(tp.code(v)) - v;
                d * d
            })
            .sum()
    };
    sum / x.len() as f64
}

/// Candidate values for the tan quantizer parameter search.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchGrid {
    pub a: Vec<f64>,
    pub b_focus: Vec<f64>,
}

impl SearchGrid {
    /// `na` log-spaced curvatures in `[a_min, a_max]` and `nb` evenly spaced
    /// focus points strictly inside `(0, 1)`.
    pub fn new(a_min: f64, a_max: f64, na: usize, nb: usize) -> Self {
        let a = (0..na)
            .map(|i| {
                if na == 1 {
                    a_min
                } else {
                    a_min * (a_max / a_min).powf(i as f64 / (na - 1) as f64)
                }
            })
            .collect();
        let b_focus = (1..=nb).map(|j| j as f64 / (nb + 1) as f64).collect();
        Self { a, b_focus }
    }

    pub fn feasible_pairs(&self) -> Vec<(f64, f64)> {
        self.a
            .iter()
            .flat_map(|&a| self.b_focus.iter().map(move |&b| (a, b)))
            .filter(|&(a, b)| tan_feasible(a, b))
            .collect()
    }
}

impl Default for SearchGrid {
    fn default() -> Self {
        Self::new(0.3, 12.0, 32, 32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TanSearch {
    pub params: TanParams,
    pub mse: f64,
    pub evaluated: usize,
}

/// Exhaustive search over the feasible pairs of `grid`, recalibrating the
/// inner grid for each pair. Ties go to the smallest `a`, then the smallest `b`.
pub fn tanq_grid_search(x: &Tensor, bits: u32, grid: &SearchGrid) -> Result<TanSearch> {
    check_bits(bits)?;
    if x.is_empty() {
        return Err(Error::Domain("grid search on an empty corpus".into()));
    }
    let pairs = grid.feasible_pairs();
    if pairs.is_empty() {
        return Err(Error::Config("tan search grid has no feasible (a, b) pair".into()));
    }
    let values: Vec<f64> = x.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let (lo, hi) = (x.min(), x.max());
    let scored: Vec<(f64, TanParams)> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let tp = TanParams::from_range(a, b, lo, hi, bits)?;
            Ok((tanq_mse(&values, &tp), tp))
        })
        .collect::<Result<_>>()?;
    let evaluated = scored.len();
    let (mse, params) = scored
        .into_iter()
        .min_by(|(m1, p1), (m2, p2)| {
            m1.total_cmp(m2)
                .then(p1.a.total_cmp(&p2.a))
                .then(p1.b_focus.total_cmp(&p2.b_focus))
        })
        .expect("nonempty candidate list");
    Ok(TanSearch {
        params,
        mse,
        evaluated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec()).unwrap()
    }

    fn softmax_rows(rows: usize, n: usize, sigma: f64, seed: u64) -> Vec<f64> {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).unwrap();
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            let logits: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            out.extend(e.iter().map(|v| v / s));
        }
        out
    }

    #[test]
    fn focus_maps_to_zero_point() {
        let tp = TanParams::from_range(1.2, 0.6, 0.0, 1.0, 4).unwrap();
        let q = tanq_quant(&t(&[0.6]), &tp).unwrap();
        assert_eq!(q.data()[0], tp.inner.zero_point[0]);
        let back = tanq_dequant(&q, &tp).unwrap();
        assert_eq!(back.data()[0], 0.6);
    }

    #[test]
    fn infeasible_pair_rejected() {
        // 0.9 − π/4 = 0.115 > 0
        assert!(!tan_feasible(2.0, 0.9));
        assert!(matches!(
            TanParams::from_range(2.0, 0.9, 0.0, 1.0, 4),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn codes_match_scalar_reference() {
        let (a, b) = (1.2, 0.6);
        let tp = TanParams::from_range(a, b, 0.0, 1.0, 4).unwrap();
        let xs = [0.0, 0.05, 0.13, 0.31, 0.5, 0.74, 0.92, 1.0];
        let codes = tanq_quant(&t(&xs), &tp).unwrap();
        let (s, z) = (tp.inner.scale[0], tp.inner.zero_point[0] as f64);
        for (&x, &c) in xs.iter().zip(codes.data()) {
            let warped = (a * (x - b)).tan();
            let expect = ((warped / s).round_ties_even() + z).clamp(0.0, 15.0) as i32;
            assert_eq!(c, expect, "x = {x}");
        }
    }

    #[test]
    fn grid_points_round_trip() {
        let tp = TanParams::from_range(1.4, 0.45, 0.0, 1.0, 5).unwrap();
        let all = IntTensor::new(vec![32], (0..32).collect()).unwrap();
        let levels = tanq_dequant(&all, &tp).unwrap();
        let inner: Vec<usize> = (0..32)
            .filter(|&q| levels.data()[q] > 0.0 && levels.data()[q] < 1.0)
            .collect();
        assert!(inner.len() > 28);
        let xs = t(&inner.iter().map(|&q| levels.data()[q]).collect::<Vec<_>>());
        let codes = tanq_quant(&xs, &tp).unwrap();
        for (&q, &c) in inner.iter().zip(codes.data()) {
            assert_eq!(q as i32, c);
        }
        let back = tanq_dequant(&codes, &tp).unwrap();
        assert!(back.max_abs_diff(&xs).unwrap() <= 1e-12);
    }

    #[test]
    fn dequant_stays_in_unit_interval() {
        let tp = TanParams::from_range(3.0, 0.5, 0.0, 1.0, 6).unwrap();
        for q in 0..64 {
            let v = tp.level(q);
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn out_of_range_inputs_counted() {
        let tp = TanParams::from_range(1.0, 0.5, 0.0, 1.0, 4).unwrap();
        let (codes, clamped) = tanq_quant_counted(&t(&[-0.2, 0.5, 1.3]), &tp).unwrap();
        assert_eq!(clamped, 2);
        assert_eq!(codes.data()[0], tp.code(0.0));
        assert_eq!(codes.data()[2], tp.code(1.0));
    }

    #[test]
    fn literal_dequant_collapses_small_codes() {
        let tp = TanParams::from_range(1.0, 0.5, 0.0, 1.0, 4).unwrap();
        let z = tp.inner.zero_point[0];
        let near = IntTensor::new(vec![2], vec![z + 1, z - 1]).unwrap();
        let lit = tanq_dequant_literal(&near, &tp).unwrap();
        assert_eq!(lit.data(), &[0.5, 0.5]);
        let fixed = tanq_dequant(&near, &tp).unwrap();
        assert!(fixed.data()[0] > 0.5 && fixed.data()[1] < 0.5);
    }

    #[test]
    fn default_grid_shape() {
        let g = SearchGrid::default();
        assert_eq!(g.a.len(), 32);
        assert_eq!(g.b_focus.len(), 32);
        assert!((g.a[0] - 0.3).abs() < 1e-15 && (g.a[31] - 12.0).abs() < 1e-12);
        assert!(g.b_focus.iter().all(|&b| b > 0.0 && b < 1.0));
        assert!(!g.feasible_pairs().is_empty());
    }

    #[test]
    fn search_recovers_exactly_representable_corpus() {
        let grid = SearchGrid::default();
        let (a, b) = (grid.a[10], grid.b_focus[16]);
        assert!(tan_feasible(a, b));
        // pick an inner grid whose end codes stay inside [0, 1]
        let bits = 4;
        let z = 8;
        let s = 0.9 * tan_transform(0.0, a, b).abs().min(tan_transform(1.0, a, b)) / 8.0;
        let inner = QuantParams::layer_wise(bits, s, z).unwrap();
        let tp = TanParams::new(a, b, inner).unwrap();
        let corpus = t(&tp.levels());
        let found = tanq_grid_search(&corpus, bits, &grid).unwrap();
        assert_eq!((found.params.a, found.params.b_focus), (a, b));
        assert!(found.mse <= 1e-24, "{}", found.mse);
    }

    #[test]
    fn search_result_beats_every_candidate() {
        let x = t(&softmax_rows(64, 16, 3.0, 4));
        let grid = SearchGrid::default();
        let found = tanq_grid_search(&x, 4, &grid).unwrap();
        assert!(tan_feasible(found.params.a, found.params.b_focus));
        for (a, b) in grid.feasible_pairs() {
            let tp = TanParams::calibrate(&x, a, b, 4).unwrap();
            assert!(found.mse <= tanq_mse(x.data(), &tp));
        }
    }

    #[test]
    fn search_rejects_empty_feasible_grid() {
        let grid = SearchGrid {
            a: vec![50.0],
            b_focus: vec![0.5],
        };
        assert!(matches!(
            tanq_grid_search(&t(&[0.1, 0.2]), 4, &grid),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn feasibility_matches_principal_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..2000 {
            let a: f64 = rng.random_range(0.01..8.0);
            let b: f64 = rng.random_range(0.001..0.999);
            let inside = (a * (0.0 - b)).abs() < FRAC_PI_2 && (a * (1.0 - b)).abs() < FRAC_PI_2;
            assert_eq!(tan_feasible(a, b), inside, "a={a} b={b}");
        }
    }

    proptest! {
        #[test]
        fn transform_strictly_increasing(a in 0.05f64..3.1, b in 0.05f64..0.95, x in 0.0f64..0.999) {
            prop_assume!(tan_feasible(a, b));
            prop_assert!(tan_transform(x, a, b) < tan_transform(x + 1e-3, a, b));
        }

        #[test]
        fn warped_round_trip_within_half_cell(a in 0.2f64..3.1, b in 0.02f64..0.98, x in 0.0f64..=1.0, bits in 2u32..9) {
            prop_assume!(tan_feasible(a, b));
            let tp = TanParams::from_range(a, b, 0.0, 1.0, bits).unwrap();
            let s = tp.inner.scale[0];
            let raw = tp.transform(x) / s + tp.inner.zero_point[0] as f64;
            prop_assume!(raw >= -0.5 && raw <= qmax(bits) as f64 + 0.5);
            let back = tp.level(tp.code(x));
            prop_assert!((tp.transform(back) - tp.transform(x)).abs() <= s / 2.0 * (1.0 + 1e-9) + 1e-12);
        }
    }
}
