use super::PlanTemplate;
use crate::error::{Error, Result};
use crate::quantizers::{uq_calibrate, Granularity, Quantizer, QuantizerKind};
use crate::tensor::Tensor;
use crate::toyvit::{BlockPlan, BlockTrace, QuantPlan, Site, ViTWeights};

/// At most `max` evenly strided values of `x`, always including its minimum
/// and maximum.
pub fn subsample_with_extremes(x: &[f64], max: usize) -> Vec<f64> {
    if x.len() <= max || max < 2 {
        return x.to_vec();
    }
    let (mut lo, mut hi) = (0, 0);
    for (i, v) in x.iter().enumerate() {
        if *v < x[lo] {
            lo = i;
        }
        if *v > x[hi] {
            hi = i;
        }
    }
    let keep = max - 2;
    let mut out: Vec<f64> = (0..keep).map(|i| x[i * x.len() / keep]).collect();
    out.push(x[lo]);
    out.push(x[hi]);
    out
}

fn activation_quantizer(site: Site, x: &Tensor, t: &PlanTemplate) -> Result<Quantizer> {
    match site {
        Site::Ln1 | Site::Ln2 => Ok(Quantizer::Uniform(uq_calibrate(
            x,
            t.bits_a,
            Granularity::ChannelWise { axis: 1 },
        )?)),
        Site::Softmax => match t.softmax {
            QuantizerKind::Tan => {
                let sample = Tensor::from_vec(subsample_with_extremes(x.data(), t.tan_sample))?;
                t.softmax.calibrate(&sample, t.bits_a, &t.tan_grid.grid())
            }
            kind => kind.calibrate(x, t.bits_a, &t.tan_grid.grid()),
        },
        _ => Ok(Quantizer::Uniform(uq_calibrate(x, t.bits_a, Granularity::LayerWise)?)),
    }
}

/// Channel-wise (per output column) uniform quantizers for every weight site.
pub fn calibrate_weights(plan: &mut QuantPlan, weights: &ViTWeights, bits_w: u32) -> Result<()> {
    if plan.blocks.len() != weights.blocks.len() {
        return Err(Error::Dimension(format!(
            "plan for {} blocks, model has {}",
            plan.blocks.len(),
            weights.blocks.len()
        )));
    }
    for (bp, w) in plan.blocks.iter_mut().zip(&weights.blocks) {
        for (site, layer) in [
            (Site::QkvW, &w.qkv),
            (Site::ProjW, &w.proj),
            (Site::Fc1W, &w.fc1),
            (Site::Fc2W, &w.fc2),
        ] {
            let p = uq_calibrate(&layer.weight, bits_w, Granularity::ChannelWise { axis: 1 })?;
            bp.set(site, Quantizer::Uniform(p));
        }
    }
    Ok(())
}

/// Full-precision passes over `corpus`, then min/max calibration of every
/// site: channel-wise weights and post-LayerNorm activations, layer-wise
/// linear inputs, and the template's family at the post-Softmax site.
pub fn calibrate_model(weights: &ViTWeights, corpus: &Tensor, t: &PlanTemplate) -> Result<QuantPlan> {
    if corpus.is_empty() {
        return Err(Error::Domain("empty calibration corpus".into()));
    }
    let heads = weights.config.heads;
    let mut plan = QuantPlan::default();
    let mut cur = corpus.clone();
    for w in &weights.blocks {
        let trace = BlockTrace::new(&cur, w, heads, None)?;
        let mut bp = BlockPlan::default();
        for site in Site::ACTIVATIONS {
            let x = trace.site_input(site).expect("activation site");
            bp.set(site, activation_quantizer(site, x, t)?);
        }
        plan.blocks.push(bp);
        cur = trace.output();
    }
    calibrate_weights(&mut plan, weights, t.bits_w)?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizers::tan_feasible;
    use crate::toyvit::{gaussian_tokens, init_weights, ViTConfig};

    #[test]
    fn subsample_keeps_extremes() {
        let x: Vec<f64> = (0..1000).map(|i| ((i * 7919) % 1000) as f64).collect();
        let s = subsample_with_extremes(&x, 50);
        assert_eq!(s.len(), 50);
        assert!(s.contains(&0.0) && s.contains(&999.0));
        assert_eq!(subsample_with_extremes(&x[..10], 50).len(), 10);
    }

    #[test]
    fn calibration_contract() {
        let cfg = ViTConfig::lab(1);
        let w = init_weights(&cfg).unwrap();
        let corpus = gaussian_tokens(&cfg, 16, 2).unwrap();
        let t = PlanTemplate {
            tan_sample: 2048,
            ..PlanTemplate::default()
        };
        let a = calibrate_model(&w, &corpus, &t).unwrap();
        let b = calibrate_model(&w, &corpus, &t).unwrap();
        assert_eq!(a, b);
        for bp in &a.blocks {
            match bp.get(Site::Softmax).unwrap() {
                Quantizer::Tan(tp) => assert!(tan_feasible(tp.a, tp.b_focus)),
                other => panic!("expected tan quantizer, got {other:?}"),
            }
            for site in [Site::Ln1, Site::Ln2] {
                match bp.get(site).unwrap() {
                    Quantizer::Uniform(p) => {
                        assert_eq!(p.scale.len(), cfg.dim);
                        assert!(p.is_channel_wise());
                    }
                    other => panic!("{other:?}"),
                }
            }
            assert_eq!(bp.sites.len(), 12);
        }
    }
}
