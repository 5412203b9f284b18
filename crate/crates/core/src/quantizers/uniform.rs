use super::{check_bits, offset_code, qmax, to_code, Granularity, QuantParams};
use crate::error::Result;
use crate::tensor::{channel_minmax, IntTensor, Tensor};

/// Min/max calibration, per tensor or per channel.
pub fn uq_calibrate(x: &Tensor, bits: u32, granularity: Granularity) -> Result<QuantParams> {
    check_bits(bits)?;
    let (scale, zero_point) = match granularity {
        Granularity::LayerWise => {
            let (s, z) = QuantParams::channel_from_range(x.min(), x.max(), bits);
            (vec![s], vec![z])
        }
        Granularity::ChannelWise { axis } => {
            let stats = channel_minmax(x, axis)?;
            stats
                .min
                .iter()
                .zip(&stats.max)
                .map(|(&lo, &hi)| QuantParams::channel_from_range(lo, hi, bits))
                .unzip()
        }
    };
    Ok(QuantParams {
        bits,
        scale,
        zero_point,
        granularity,
    })
}

/// `clamp(round(x/s) + z, 0, 2^b − 1)` elementwise.
pub fn uq_quant(x: &Tensor, p: &QuantParams) -> Result<IntTensor> {
    let (channels, stride) = p.layout_for(x.shape())?;
    let top = qmax(p.bits);
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = (i / stride) % channels;
            to_code(v / p.scale[c], p.zero_point[c], top)
        })
        .collect();
    Ok(IntTensor::from_parts(x.shape().to_vec(), data))
}

/// `s·(q − z)` elementwise.
pub fn uq_dequant(q: &IntTensor, p: &QuantParams) -> Result<Tensor> {
    let (channels, stride) = p.layout_for(q.shape())?;
    let data = q
        .data()
        .iter()
        .enumerate()
        .map(|(i, &code)| {
            let c = (i / stride) % channels;
            p.scale[c] * (code - p.zero_point[c]) as f64
        })
        .collect();
    Ok(Tensor::from_parts(q.shape().to_vec(), data))
}

pub(super) fn fake_quant(x: &Tensor, p: &QuantParams) -> Result<Tensor> {
    let (channels, stride) = p.layout_for(x.shape())?;
    let top = qmax(p.bits);
    let data = if channels == 1 {
        let (s, z) = (p.scale[0], p.zero_point[0]);
        x.data()
            .iter()
            .map(|&v| s * offset_code(v / s, z, top))
            .collect()
    } else if stride == 1 {
        let mut out = Vec::with_capacity(x.len());
        for row in x.data().chunks(channels) {
            out.extend(
                row.iter()
                    .zip(p.scale.iter().zip(&p.zero_point))
                    .map(|(&v, (&s, &z))| s * offset_code(v / s, z, top)),
            );
        }
        out
    } else {
        x.data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = (i / stride) % channels;
                let (s, z) = (p.scale[c], p.zero_point[c]);
                s * offset_code(v / s, z, top)
            })
            .collect()
    };
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizers::Quantizer;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec()).unwrap()
    }

    #[test]
    fn calibrate_integer_grid() {
        let x = t(&(0..16).map(f64::from).collect::<Vec<_>>());
        let p = uq_calibrate(&x, 4, Granularity::LayerWise).unwrap();
        assert_eq!((p.scale[0], p.zero_point[0]), (1.0, 0));
    }

    #[test]
    fn calibrate_symmetric_two_bit() {
        // s = 2/3, −min/s = 1.5 which rounds half to even → 2.
        let p = uq_calibrate(&t(&[-1.0, 1.0]), 2, Granularity::LayerWise).unwrap();
        assert!((p.scale[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(p.zero_point[0], 2);
    }

    #[test]
    fn calibrate_degenerate_range() {
        let p = uq_calibrate(&t(&[3.0, 3.0, 3.0]), 4, Granularity::LayerWise).unwrap();
        assert_eq!((p.scale[0], p.zero_point[0]), (1.0, 0));
        // constant inside the code range round-trips exactly
        let p = uq_calibrate(&t(&[-5.0; 3]), 4, Granularity::LayerWise).unwrap();
        let fq = fake_quant(&t(&[-5.0; 3]), &p).unwrap();
        assert_eq!(fq.data(), &[-5.0; 3]);
    }

    #[test]
    fn quant_examples() {
        let p = QuantParams::layer_wise(4, 1.0, 0).unwrap();
        assert_eq!(uq_quant(&t(&[0.0]), &p).unwrap().data(), &[0]);
        assert_eq!(uq_quant(&t(&[100.0]), &p).unwrap().data(), &[15]);
        let top = IntTensor::new(vec![1], vec![15]).unwrap();
        assert_eq!(uq_dequant(&top, &p).unwrap().data(), &[15.0]);
        let p = QuantParams::layer_wise(4, 0.3, 7).unwrap();
        let z = IntTensor::new(vec![1], vec![7]).unwrap();
        assert_eq!(uq_dequant(&z, &p).unwrap().data(), &[0.0]);
    }

    #[test]
    fn codes_match_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = t(&(0..500).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
        let p = uq_calibrate(&x, 5, Granularity::LayerWise).unwrap();
        let codes = uq_quant(&x, &p).unwrap();
        let (s, z) = (p.scale[0], p.zero_point[0] as f64);
        for (&v, &c) in x.data().iter().zip(codes.data()) {
            let r = v / s;
            let fl = r.floor();
            let rounded = if r - fl == 0.5 {
                if fl % 2.0 == 0.0 { fl } else { fl + 1.0 }
            } else {
                (r + 0.5).floor()
            };
            let expect = (rounded + z).clamp(0.0, 31.0) as i32;
            assert_eq!(c, expect);
        }
    }

    #[test]
    fn eight_bit_round_trip_within_half_cell() {
        let x = t(&(0..=2000).map(|i| -0.7 + 1.9 * i as f64 / 2000.0).collect::<Vec<_>>());
        let p = uq_calibrate(&x, 8, Granularity::LayerWise).unwrap();
        let back = fake_quant(&x, &p).unwrap();
        let err = back.max_abs_diff(&x).unwrap();
        assert!(err <= p.scale[0] / 2.0 + 1e-12, "{err}");
    }

    #[test]
    fn sixteen_bit_relative_error() {
        let x = t(&(1..=1000).map(|i| 1.5 * (i as f64 * 0.01).sin() + 0.4).collect::<Vec<_>>());
        let p = uq_calibrate(&x, 16, Granularity::LayerWise).unwrap();
        let back = fake_quant(&x, &p).unwrap();
        let peak = x.max_abs();
        for (a, b) in x.data().iter().zip(back.data()) {
            assert!((a - b).abs() / peak <= 1e-3);
        }
    }

    #[test]
    fn fake_quant_idempotent_and_zero_preserving() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = t(&(0..256).map(|_| rng.random_range(-2.0..3.0)).collect::<Vec<_>>());
        let q = Quantizer::Uniform(uq_calibrate(&x, 4, Granularity::LayerWise).unwrap());
        let once = q.fake_quant(&x).unwrap();
        assert_eq!(q.fake_quant(&once).unwrap(), once);
        let zeros = Tensor::zeros(vec![8]);
        assert_eq!(q.fake_quant(&zeros).unwrap(), zeros);
    }

    #[test]
    fn channel_wise_matches_per_channel_layer_wise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::new(vec![10, 3], (0..30).map(|i| rng.random_range(-1.0..1.0) * (i % 3 + 1) as f64).collect())
            .unwrap();
        let p = uq_calibrate(&x, 4, Granularity::ChannelWise { axis: 1 }).unwrap();
        let codes = uq_quant(&x, &p).unwrap();
        for c in 0..3 {
            let col: Vec<f64> = (0..10).map(|r| x.data()[r * 3 + c]).collect();
            let pc = uq_calibrate(&t(&col), 4, Granularity::LayerWise).unwrap();
            assert_eq!(pc.scale[0], p.scale[c]);
            let cc = uq_quant(&t(&col), &pc).unwrap();
            for r in 0..10 {
                assert_eq!(cc.data()[r], codes.data()[r * 3 + c]);
            }
        }
    }

    #[test]
    fn equal_channel_params_match_layer_wise() {
        let x = Tensor::new(vec![4, 2], vec![0.1, -0.4, 0.9, 0.3, -1.0, 0.2, 0.5, 0.7]).unwrap();
        let layer = QuantParams::layer_wise(4, 0.13, 8).unwrap();
        let chan = QuantParams {
            bits: 4,
            scale: vec![0.13; 2],
            zero_point: vec![8; 2],
            granularity: Granularity::ChannelWise { axis: 1 },
        };
        assert_eq!(uq_quant(&x, &layer).unwrap(), uq_quant(&x, &chan).unwrap());
    }

    proptest! {
        #[test]
        fn quant_is_monotone(a in -10.0f64..10.0, b in -10.0f64..10.0, s in 0.01f64..2.0, z in 0i32..16) {
            let p = QuantParams::layer_wise(4, s, z).unwrap();
            let codes = uq_quant(&t(&[a.min(b), a.max(b)]), &p).unwrap();
            prop_assert!(codes.data()[0] <= codes.data()[1]);
        }

        #[test]
        fn fake_quant_is_dequant_of_quant(
            v in proptest::collection::vec(-50.0f64..50.0, 12),
            bits in 2u32..9,
            axis in 0usize..2,
        ) {
            let x = Tensor::new(vec![4, 3], v).unwrap();
            for g in [Granularity::LayerWise, Granularity::ChannelWise { axis }] {
                let p = uq_calibrate(&x, bits, g).unwrap();
                let fq = Quantizer::Uniform(p.clone()).fake_quant(&x).unwrap();
                let dq = uq_dequant(&uq_quant(&x, &p).unwrap(), &p).unwrap();
                let same = fq.data().iter().zip(dq.data()).all(|(a, b)| a.to_bits() == b.to_bits());
                prop_assert!(same, "{:?} vs {:?}", fq, dq);
            }
        }
    }
}
