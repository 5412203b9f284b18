//! Channel-wise → layer-wise scale reparameterization of post-LayerNorm
//! activations.
//!
//! Per-channel factors `(s, z)` are replaced by one shared `(s̃, z̃)`. The
//! variation factors `r1 = s/s̃` and `r2 = z − z̃` are absorbed into the
//! LayerNorm affine (`γ̃ = γ/r1`, `β̃ = (β + s⊙r2)/r1`) and into the next
//! linear layer (`W̃ = r1⊙W` row-wise, `b̃ = b − (s⊙r2)W`). With integral
//! `z̃` the activation codes of both paths are identical, so the choice of
//! `s̃` only matters downstream, through the weights the quantizer sees.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::quantizers::{qmax, to_code, Granularity, QuantParams};
use crate::tensor::{matmul, mean, mean_abs_dev, median, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNormAffine {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNormAffine {
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    /// `γ⊙x̂ + β` on rows of normalized values.
    pub fn apply(&self, x_hat: &Tensor) -> Result<Tensor> {
        let d = self.dim();
        if self.beta.len() != d || x_hat.last_dim() != d {
            return Err(dim_err!(
                "affine of width {d} (β {}) applied to {:?}",
                self.beta.len(),
                x_hat.shape()
            ));
        }
        let data = x_hat
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| self.gamma[i % d] * v + self.beta[i % d])
            .collect();
        Tensor::new(x_hat.shape().to_vec(), data)
    }
}

/// `y = xW + b` with `W` stored `[in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl LinearLayer {
    pub fn new(weight: Tensor, bias: Vec<f64>) -> Result<Self> {
        if weight.ndim() != 2 || weight.shape()[1] != bias.len() {
            return Err(dim_err!(
                "weight {:?} with bias of length {}",
                weight.shape(),
                bias.len()
            ));
        }
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = matmul(x, &self.weight)?;
        let n = self.out_dim();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += self.bias[i % n];
        }
        Ok(y)
    }
}

/// How the shared factor is chosen from the per-channel ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleSelect {
    /// Median of `s` and of `z`.
    Mosf,
    /// Arithmetic means.
    Repq,
}

impl ScaleSelect {
    pub fn select(self, s: &[f64], z: &[i32]) -> Result<(f64, i32)> {
        match self {
            ScaleSelect::Mosf => mosf_select(s, z),
            ScaleSelect::Repq => repq_select(s, z),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScaleSelect::Mosf => "mosf",
            ScaleSelect::Repq => "repq",
        }
    }
}

fn check_select_inputs(s: &[f64], z: &[i32]) -> Result<Vec<f64>> {
    if s.is_empty() || s.len() != z.len() {
        return Err(Error::Domain(format!(
            "{} scales and {} zero points",
            s.len(),
            z.len()
        )));
    }
    if let Some(v) = s.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::Domain(format!("scale {v} is not positive")));
    }
    Ok(z.iter().map(|&v| v as f64).collect())
}

/// `s̃ = median(s)`, `z̃ = round(median(z))`.
pub fn mosf_select(s: &[f64], z: &[i32]) -> Result<(f64, i32)> {
    let zf = check_select_inputs(s, z)?;
    Ok((median(s)?, median(&zf)?.round_ties_even() as i32))
}

/// `s̃ = mean(s)`, `z̃ = round(mean(z))`.
pub fn repq_select(s: &[f64], z: &[i32]) -> Result<(f64, i32)> {
    let zf = check_select_inputs(s, z)?;
    Ok((mean(s)?, mean(&zf)?.round_ties_even() as i32))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Mean,
    Median,
    Min,
    Max,
    Mode,
}

impl Statistic {
    pub const ALL: [Statistic; 5] = [
        Statistic::Mean,
        Statistic::Median,
        Statistic::Min,
        Statistic::Max,
        Statistic::Mode,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Statistic::Mean => "mean",
            Statistic::Median => "median",
            Statistic::Min => "min",
            Statistic::Max => "max",
            Statistic::Mode => "mode",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MadRow {
    pub statistic: Statistic,
    pub center: f64,
    pub mad: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MadTable {
    pub rows: Vec<MadRow>,
}

impl MadTable {
    pub fn get(&self, stat: Statistic) -> &MadRow {
        self.rows
            .iter()
            .find(|r| r.statistic == stat)
            .expect("every statistic is scored")
    }

    /// Whether the median row is no worse than every other row, allowing
    /// `rel_tol` of floating-point slack for exact ties.
    pub fn median_is_minimal(&self, rel_tol: f64) -> bool {
        let m = self.get(Statistic::Median).mad;
        self.rows.iter().all(|r| m <= r.mad + rel_tol * r.mad.abs())
    }
}

const MODE_BINS: usize = 64;

/// Center of the fullest of 64 equal-width histogram bins; lowest bin on ties.
fn histogram_peak(s: &[f64]) -> f64 {
    let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return lo;
    }
    let width = (hi - lo) / MODE_BINS as f64;
    let mut counts = [0usize; MODE_BINS];
    for &v in s {
        let b = (((v - lo) / width) as usize).min(MODE_BINS - 1);
        counts[b] += 1;
    }
    let best = (0..MODE_BINS)
        .max_by(|&i, &j| counts[i].cmp(&counts[j]).then(j.cmp(&i)))
        .unwrap_or(0);
    lo + (best as f64 + 0.5) * width
}

/// MAD of `s` around each candidate center.
pub fn score_candidates(s: &[f64]) -> Result<MadTable> {
    if s.is_empty() {
        return Err(Error::Domain("scoring an empty scale vector".into()));
    }
    let rows = Statistic::ALL
        .iter()
        .map(|&statistic| {
            let center = match statistic {
                Statistic::Mean => mean(s)?,
                Statistic::Median => median(s)?,
                Statistic::Min => s.iter().copied().fold(f64::INFINITY, f64::min),
                Statistic::Max => s.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                Statistic::Mode => histogram_peak(s),
            };
            Ok(MadRow {
                statistic,
                center,
                mad: mean_abs_dev(s, center)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MadTable { rows })
}

/// Per-channel factors, the shared pair, and the variation factors between
/// them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReparamBundle {
    pub bits: u32,
    pub s: Vec<f64>,
    pub z: Vec<i32>,
    pub s_tilde: f64,
    pub z_tilde: i32,
    pub r1: Vec<f64>,
    pub r2: Vec<i32>,
}

impl ReparamBundle {
    pub fn new(s: Vec<f64>, z: Vec<i32>, s_tilde: f64, z_tilde: i32, bits: u32) -> Result<Self> {
        check_select_inputs(&s, &z)?;
        if !(s_tilde.is_finite() && s_tilde > 0.0) {
            return Err(Error::Parameter(format!("shared scale {s_tilde} is not positive")));
        }
        let top = qmax(bits);
        if !(0..=top).contains(&z_tilde) {
            return Err(Error::Parameter(format!("shared zero point {z_tilde} outside [0, {top}]")));
        }
        let r1 = s.iter().map(|v| v / s_tilde).collect();
        let r2 = z.iter().map(|v| v - z_tilde).collect();
        Ok(Self {
            bits,
            s,
            z,
            s_tilde,
            z_tilde,
            r1,
            r2,
        })
    }

    /// Bundle for channel-wise parameters with the shared pair chosen by `select`.
    pub fn from_params(p: &QuantParams, select: ScaleSelect) -> Result<Self> {
        let (s_tilde, z_tilde) = select.select(&p.scale, &p.zero_point)?;
        Self::new(p.scale.clone(), p.zero_point.clone(), s_tilde, z_tilde, p.bits)
    }

    pub fn dim(&self) -> usize {
        self.s.len()
    }

    pub fn channel_params(&self) -> QuantParams {
        QuantParams {
            bits: self.bits,
            scale: self.s.clone(),
            zero_point: self.z.clone(),
            granularity: Granularity::ChannelWise { axis: 1 },
        }
    }

    pub fn shared_params(&self) -> QuantParams {
        QuantParams {
            bits: self.bits,
            scale: vec![self.s_tilde],
            zero_point: vec![self.z_tilde],
            granularity: Granularity::LayerWise,
        }
    }
}

/// Absorbs the variation factors into the LayerNorm affine and the next
/// linear layer.
pub fn reparameterize(
    ln: &LayerNormAffine,
    next: &LinearLayer,
    bundle: &ReparamBundle,
) -> Result<(LayerNormAffine, LinearLayer)> {
    let d = bundle.dim();
    if ln.gamma.len() != d || ln.beta.len() != d || next.in_dim() != d {
        return Err(dim_err!(
            "bundle of width {d} vs affine ({}, {}) and weight {:?}",
            ln.gamma.len(),
            ln.beta.len(),
            next.weight.shape()
        ));
    }
    let shift: Vec<f64> = bundle
        .s
        .iter()
        .zip(&bundle.r2)
        .map(|(s, &r)| s * r as f64)
        .collect();
    let gamma = ln.gamma.iter().zip(&bundle.r1).map(|(g, r)| g / r).collect();
    let beta = ln
        .beta
        .iter()
        .zip(&shift)
        .zip(&bundle.r1)
        .map(|((b, sh), r)| (b + sh) / r)
        .collect();

    let out = next.out_dim();
    let w = next.weight.data();
    let mut w_new = w.to_vec();
    let mut bias = next.bias.clone();
    for i in 0..d {
        let row = &mut w_new[i * out..(i + 1) * out];
        for (j, v) in row.iter_mut().enumerate() {
            *v *= bundle.r1[i];
            bias[j] -= shift[i] * w[i * out + j];
        }
    }
    Ok((
        LayerNormAffine { gamma, beta },
        LinearLayer::new(Tensor::new(vec![d, out], w_new)?, bias)?,
    ))
}

/// Outcome of comparing the channel-wise path with its reparameterized
/// layer-wise counterpart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub fp_max_abs_delta: f64,
    pub fp_max_rel_delta: f64,
    pub codes_total: usize,
    pub codes_matching: usize,
    pub dequant_max_abs_delta: f64,
    pub dequant_max_rel_delta: f64,
}

impl EquivalenceReport {
    pub fn code_agreement(&self) -> f64 {
        self.codes_matching as f64 / self.codes_total as f64
    }

    pub fn holds(&self, rel_tol: f64) -> bool {
        self.codes_matching == self.codes_total
            && self.fp_max_rel_delta <= rel_tol
            && self.dequant_max_rel_delta <= rel_tol
    }
}

fn rel(delta: f64, reference: &Tensor) -> f64 {
    let m = reference.max_abs();
    if delta == 0.0 {
        0.0
    } else {
        delta / m.max(f64::MIN_POSITIVE)
    }
}

/// Runs both paths on `x_hat` (normalized, pre-affine rows `[n, D]`).
pub fn verify_equivalence(
    ln: &LayerNormAffine,
    next: &LinearLayer,
    bundle: &ReparamBundle,
    x_hat: &Tensor,
) -> Result<EquivalenceReport> {
    let (ln2, next2) = reparameterize(ln, next, bundle)?;
    let d = bundle.dim();
    let x_aff = ln.apply(x_hat)?;
    let x_rep = ln2.apply(x_hat)?;

    let y = next.forward(&x_aff)?;
    let y_rep = next2.forward(&x_rep)?;
    let fp_delta = y.max_abs_diff(&y_rep)?;

    let top = qmax(bundle.bits);
    let codes: Vec<i32> = x_aff
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| to_code(v / bundle.s[i % d], bundle.z[i % d], top))
        .collect();
    let codes_rep: Vec<i32> = x_rep
        .data()
        .iter()
        .map(|&v| to_code(v / bundle.s_tilde, bundle.z_tilde, top))
        .collect();
    let codes_matching = codes.iter().zip(&codes_rep).filter(|(a, b)| a == b).count();

    let xq: Vec<f64> = codes
        .iter()
        .enumerate()
        .map(|(i, &q)| bundle.s[i % d] * (q - bundle.z[i % d]) as f64)
        .collect();
    let xq_rep: Vec<f64> = codes_rep
        .iter()
        .map(|&q| bundle.s_tilde * (q - bundle.z_tilde) as f64)
        .collect();
    let yq = next.forward(&Tensor::new(x_aff.shape().to_vec(), xq)?)?;
    let yq_rep = next2.forward(&Tensor::new(x_rep.shape().to_vec(), xq_rep)?)?;
    let dq_delta = yq.max_abs_diff(&yq_rep)?;

    Ok(EquivalenceReport {
        fp_max_abs_delta: fp_delta,
        fp_max_rel_delta: rel(fp_delta, &y),
        codes_total: codes.len(),
        codes_matching,
        dequant_max_abs_delta: dq_delta,
        dequant_max_rel_delta: rel(dq_delta, &yq),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lin(w: Vec<f64>, rows: usize, b: Vec<f64>) -> LinearLayer {
        let cols = b.len();
        LinearLayer::new(Tensor::new(vec![rows, cols], w).unwrap(), b).unwrap()
    }

    #[test]
    fn select_examples() {
        assert_eq!(mosf_select(&[1.0, 2.0, 3.0], &[0, 1, 2]).unwrap(), (2.0, 1));
        let s = [1.0, 1.0, 1.0, 1.0, 100.0];
        let z = [0; 5];
        assert_eq!(mosf_select(&s, &z).unwrap().0, 1.0);
        assert!((repq_select(&s, &z).unwrap().0 - 20.8).abs() < 1e-12);
        assert_eq!(repq_select(&[1.0; 3], &[0, 0, 2]).unwrap().1, 1);
        assert_eq!(
            mosf_select(&[0.7; 4], &[3; 4]).unwrap(),
            repq_select(&[0.7; 4], &[3; 4]).unwrap()
        );
        // even count: median of z = 1.5 rounds to 2
        assert_eq!(mosf_select(&[1.0; 4], &[0, 1, 2, 9]).unwrap().1, 2);
        assert!(mosf_select(&[], &[]).is_err());
    }

    #[test]
    fn mad_table_examples() {
        let t = score_candidates(&[1.0, 1.0, 1.0, 1.0, 100.0]).unwrap();
        assert!((t.get(Statistic::Median).mad - 19.8).abs() < 1e-12);
        assert!((t.get(Statistic::Mean).mad - 31.68).abs() < 1e-12);
        assert!(t.median_is_minimal(0.0));

        let sym = score_candidates(&[1.0, 2.0, 4.0, 6.0, 7.0]).unwrap();
        assert!((sym.get(Statistic::Mean).mad - sym.get(Statistic::Median).mad).abs() <= 1e-12);

        let flat = score_candidates(&[0.3; 7]).unwrap();
        assert!(flat.rows.iter().all(|r| r.mad == 0.0));
    }

    #[test]
    fn mode_proxy_finds_crowded_bin() {
        let mut s = vec![5.0; 10];
        s.extend([0.0, 64.0]);
        let t = score_candidates(&s).unwrap();
        assert!((t.get(Statistic::Mode).center - 5.5).abs() < 1e-12);
    }

    #[test]
    fn hand_case_two_channels() {
        let b = ReparamBundle::new(vec![1.0, 2.0], vec![1, 3], 1.0, 1, 4).unwrap();
        assert_eq!(b.r1, vec![1.0, 2.0]);
        assert_eq!(b.r2, vec![0, 2]);
        let ln = LayerNormAffine::identity(2);
        let next = lin(vec![1.0, 0.0, 0.0, 1.0], 2, vec![0.0, 0.0]);
        let (ln2, next2) = reparameterize(&ln, &next, &b).unwrap();
        assert_eq!(ln2.gamma, vec![1.0, 0.5]);
        // β̃₁ = (0 + 2·2)/2
        assert_eq!(ln2.beta, vec![0.0, 2.0]);
        assert_eq!(next2.weight.data(), &[1.0, 0.0, 0.0, 2.0]);
        // b̃ = −(s⊙r2)W = −[0, 4]
        assert_eq!(next2.bias, vec![0.0, -4.0]);
    }

    #[test]
    fn identity_bundle_is_identity_map() {
        let ln = LayerNormAffine {
            gamma: vec![0.5, 1.5, -2.0],
            beta: vec![0.1, 0.0, 3.0],
        };
        let next = lin((0..6).map(|i| i as f64 * 0.3 - 0.7).collect(), 3, vec![1.0, -1.0]);
        let b = ReparamBundle::new(vec![0.25; 3], vec![7; 3], 0.25, 7, 4).unwrap();
        let (ln2, next2) = reparameterize(&ln, &next, &b).unwrap();
        assert_eq!(ln2, ln);
        assert_eq!(next2, next);
        let x = Tensor::new(vec![2, 3], vec![0.3, -1.2, 0.8, 1.9, 0.0, -0.4]).unwrap();
        let rep = verify_equivalence(&ln, &next, &b, &x).unwrap();
        assert_eq!(rep.fp_max_abs_delta, 0.0);
        assert_eq!(rep.dequant_max_abs_delta, 0.0);
        assert_eq!(rep.code_agreement(), 1.0);
    }

    #[test]
    fn random_instances_equivalent() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let d = rng.random_range(2..12);
            let out = rng.random_range(1..8);
            let ln = LayerNormAffine {
                gamma: (0..d).map(|_| rng.random_range(0.2..3.0)).collect(),
                beta: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            };
            let next = lin(
                (0..d * out).map(|_| rng.random_range(-1.0..1.0)).collect(),
                d,
                (0..out).map(|_| rng.random_range(-1.0..1.0)).collect(),
            );
            let s: Vec<f64> = (0..d).map(|_| rng.random_range(0.01..0.5)).collect();
            let z: Vec<i32> = (0..d).map(|_| rng.random_range(0..16)).collect();
            let b = ReparamBundle::new(s, z, rng.random_range(0.01..1.0), rng.random_range(0..16), 4)
                .unwrap();
            let x = Tensor::new(
                vec![9, d],
                (0..9 * d).map(|_| rng.random_range(-3.0..3.0)).collect(),
            )
            .unwrap();
            let rep = verify_equivalence(&ln, &next, &b, &x).unwrap();
            assert!(rep.holds(1e-9), "{rep:?}");
        }
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let b = ReparamBundle::new(vec![1.0, 2.0], vec![0, 0], 1.0, 0, 4).unwrap();
        let next = lin(vec![1.0; 3], 3, vec![0.0]);
        assert!(reparameterize(&LayerNormAffine::identity(2), &next, &b).is_err());
        assert!(ReparamBundle::new(vec![1.0], vec![0], 1.0, 16, 4).is_err());
        assert!(ReparamBundle::new(vec![1.0], vec![0], 0.0, 0, 4).is_err());
    }
}
