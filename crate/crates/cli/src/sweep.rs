//! Quantizer sweep over a value corpus.

use dopq_core::{QuantizerKind, Result, SearchGrid, Tensor};
use serde::{Deserialize, Serialize};

pub const SWEEP_BITS: [u32; 4] = [3, 4, 6, 8];

/// Reconstruction error of one quantizer at one bit-width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub quantizer: QuantizerKind,
    pub bitwidth: u32,
    pub mse: f64,
    pub max_err: f64,
    /// Mean absolute error within each tenth of the corpus sorted by value,
    /// smallest values first.
    pub deciles: [f64; 10],
}

impl SweepRow {
    pub fn header() -> Vec<String> {
        let mut h: Vec<String> = ["quantizer", "bitwidth", "mse", "max_err"].map(String::from).to_vec();
        h.extend((1..=10).map(|i| format!("d{i}")));
        h
    }

    pub fn record(&self) -> Vec<String> {
        let mut r = vec![
            self.quantizer.name().to_string(),
            self.bitwidth.to_string(),
            self.mse.to_string(),
            self.max_err.to_string(),
        ];
        r.extend(self.deciles.iter().map(f64::to_string));
        r
    }
}

fn decile_profile(x: &[f64], err: &[f64]) -> [f64; 10] {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    let n = x.len();
    std::array::from_fn(|d| {
        let group = &order[d * n / 10..(d + 1) * n / 10];
        if group.is_empty() {
            0.0
        } else {
            group.iter().map(|&i| err[i]).sum::<f64>() / group.len() as f64
        }
    })
}

/// Calibrates every quantizer family on `corpus` (tan: grid search) and
/// measures `fake_quant` error at each bit-width.
pub fn sweep_quantizers(corpus: &Tensor, bits: &[u32], grid: &SearchGrid) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for kind in QuantizerKind::ALL {
        for &b in bits {
            let q = kind.calibrate(corpus, b, grid)?;
            let fq = q.fake_quant(corpus)?;
            let err: Vec<f64> = corpus.data().iter().zip(fq.data()).map(|(x, y)| (x - y).abs()).collect();
            rows.push(SweepRow {
                quantizer: kind,
                bitwidth: b,
                mse: err.iter().map(|e| e * e).sum::<f64>() / err.len() as f64,
                max_err: err.iter().copied().fold(0.0, f64::max),
                deciles: decile_profile(corpus.data(), &err),
            });
        }
    }
    Ok(rows)
}

/// Sweep rows of one family, in bit-width order.
pub fn rows_of(rows: &[SweepRow], kind: QuantizerKind) -> Vec<&SweepRow> {
    rows.iter().filter(|r| r.quantizer == kind).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::softmax_rows;

    #[test]
    fn deciles_partition_sorted_values() {
        let x: Vec<f64> = (0..20).rev().map(f64::from).collect();
        let err: Vec<f64> = x.clone();
        let d = decile_profile(&x, &err);
        assert_eq!(d[0], 0.5);
        assert_eq!(d[9], 18.5);
    }

    #[test]
    fn finer_grids_lower_error() {
        let x = softmax_rows(64, 16, 3.0, 2).unwrap();
        let rows = sweep_quantizers(&x, &[3, 8], &SearchGrid::new(0.3, 12.0, 12, 12)).unwrap();
        assert_eq!(rows.len(), 10);
        for kind in QuantizerKind::ALL {
            let r = rows_of(&rows, kind);
            assert!(r[1].mse < r[0].mse, "{kind}: {} vs {}", r[1].mse, r[0].mse);
        }
        assert_eq!(SweepRow::header().len(), rows[0].record().len());
    }
}
