use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{calibrate_model, calibrate_weights, reconstruct_block, BlockRecord, Knob, PipelineConfig, ReconOutcome};
use crate::error::{Error, Result};
use crate::quantizers::{uq_calibrate, Granularity, Quantizer};
use crate::reparam::{
    reparameterize, score_candidates, verify_equivalence, EquivalenceReport, MadTable, ReparamBundle,
    ScaleSelect,
};
use crate::tensor::{mean, median, Tensor};
use crate::toyvit::{
    block_forward, collect_block_inputs, layernorm_normalized, model_forward, BlockTrace, QuantPlan,
    Site, ViTWeights,
};

/// Relative slack under which two pipeline MSEs count as tied.
pub const TIE_REL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockStageReport {
    pub block: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub accepted: usize,
    pub evaluations: usize,
    pub passes: usize,
    pub nonincreasing: bool,
    pub trace: Vec<f64>,
}

impl BlockStageReport {
    fn new(block: usize, o: ReconOutcome) -> Self {
        Self {
            block,
            initial_loss: o.initial(),
            final_loss: o.final_loss(),
            accepted: o.accepted,
            evaluations: o.evaluations,
            passes: o.passes_run,
            nonincreasing: o.is_nonincreasing(),
            trace: o.trace,
        }
    }
}

/// Reparameterization of one post-LayerNorm site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReparamSiteReport {
    pub block: usize,
    pub site: Site,
    pub s_tilde: f64,
    pub z_tilde: i32,
    pub s_mean: f64,
    pub s_median: f64,
    pub mad: MadTable,
    pub equivalence: EquivalenceReport,
}

/// Quantized block output right after reparameterization compared with the
/// output right before it (same plan otherwise, no recalibration).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2BlockReport {
    pub block: usize,
    pub max_abs_delta: f64,
    pub max_rel_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub eval_size: usize,
    /// Fraction of held-out inputs whose top-1 class matches the
    /// full-precision model.
    pub top1_agreement: f64,
    /// Per-block output MSE on held-out inputs, each block fed the
    /// full-precision input of that block.
    pub block_mse: Vec<f64>,
    pub mean_block_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub select: ScaleSelect,
    pub stage1: Vec<BlockStageReport>,
    pub stage2: Vec<ReparamSiteReport>,
    pub stage2_safety: Vec<Stage2BlockReport>,
    pub stage3: Vec<BlockStageReport>,
    pub eval: EvalReport,
}

impl RunReport {
    pub fn traces_nonincreasing(&self) -> bool {
        self.stage1.iter().chain(&self.stage3).all(|b| b.nonincreasing)
    }
}

#[derive(Debug, Clone)]
pub struct DopqOutcome {
    /// Weights after reparameterization (functionally equal to the input).
    pub weights: ViTWeights,
    pub plan: QuantPlan,
    pub report: RunReport,
}

fn activation_knobs(plan: &QuantPlan, cfg: &PipelineConfig) -> Vec<Knob> {
    let mut knobs: Vec<Knob> = Site::ACTIVATIONS.iter().map(|&s| Knob::Scale(s)).collect();
    let has_tan = plan
        .blocks
        .iter()
        .any(|b| matches!(b.get(Site::Softmax), Some(Quantizer::Tan(_))));
    if cfg.recon.tune_tan && has_tan {
        knobs.extend([Knob::TanCurvature, Knob::TanFocus]);
    }
    knobs
}

fn chunked<F>(x: &Tensor, f: F) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    const CHUNK: usize = 32;
    let b = x.shape()[0];
    let parts: Vec<Tensor> = (0..b)
        .step_by(CHUNK)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&s| f(&x.slice_rows(s, (s + CHUNK).min(b))?))
        .collect::<Result<_>>()?;
    Tensor::concat_rows(&parts)
}

/// Reconstructs every block in order, each on its record.
fn reconstruct_all(
    w: &ViTWeights,
    plan: &mut QuantPlan,
    fp_states: &[Tensor],
    knobs: &[Knob],
    cfg: &PipelineConfig,
) -> Result<Vec<BlockStageReport>> {
    let heads = w.config.heads;
    let mut quant_in = fp_states[0].clone();
    let mut out = Vec::with_capacity(w.blocks.len());
    for (l, bw) in w.blocks.iter().enumerate() {
        let input = if cfg.quantized_inputs {
            quant_in.clone()
        } else {
            fp_states[l].clone()
        };
        let rec = BlockRecord::new(l, input, fp_states[l + 1].clone())?;
        let o = reconstruct_block(&rec, bw, heads, &mut plan.blocks[l], knobs, &cfg.recon)?;
        log::debug!("block {l}: loss {} → {} ({} accepted)", o.initial(), o.final_loss(), o.accepted);
        if cfg.quantized_inputs {
            quant_in = block_forward(&quant_in, bw, heads, Some(&plan.blocks[l]))?;
        }
        out.push(BlockStageReport::new(l, o));
    }
    Ok(out)
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Top-1 agreement and per-block MSE of the quantized model (`qw`, `plan`)
/// against the full-precision model `fp` on `eval`.
pub fn evaluate(fp: &ViTWeights, qw: &ViTWeights, plan: &QuantPlan, eval: &Tensor) -> Result<EvalReport> {
    let c = fp.config.classes;
    let a = model_forward(eval, fp, None)?;
    let b = model_forward(eval, qw, Some(plan))?;
    let n = eval.shape()[0];
    let agree = a
        .data()
        .chunks(c)
        .zip(b.data().chunks(c))
        .filter(|(x, y)| argmax(x) == argmax(y))
        .count();
    let states = collect_block_inputs(eval, fp, None)?;
    let heads = fp.config.heads;
    let block_mse = (0..fp.blocks.len())
        .map(|l| {
            let out = chunked(&states[l], |x| block_forward(x, &qw.blocks[l], heads, plan.block(l)))?;
            out.mse(&states[l + 1])
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(EvalReport {
        eval_size: n,
        top1_agreement: agree as f64 / n as f64,
        mean_block_mse: mean(&block_mse)?,
        block_mse,
    })
}

fn rows(x: &Tensor) -> Tensor {
    let d = x.last_dim();
    Tensor::new(vec![x.len() / d, d], x.data().to_vec()).expect("valid rows")
}

/// Reparameterizes both post-LayerNorm sites of every block and swaps their
/// channel-wise quantizers for the shared layer-wise ones.
fn reparameterize_all(
    w: &mut ViTWeights,
    plan: &mut QuantPlan,
    fp_states: &[Tensor],
    select: ScaleSelect,
) -> Result<Vec<ReparamSiteReport>> {
    let heads = w.config.heads;
    let mut reports = Vec::new();
    for l in 0..w.blocks.len() {
        let fp_trace = BlockTrace::new(&fp_states[l], &w.blocks[l], heads, None)?;
        for site in [Site::Ln1, Site::Ln2] {
            let p = match plan.blocks[l].get(site) {
                Some(Quantizer::Uniform(p)) if p.is_channel_wise() => p.clone(),
                other => {
                    return Err(Error::Config(format!(
                        "block {l} site {site} is not channel-wise uniform ({other:?})"
                    )))
                }
            };
            let bundle = ReparamBundle::from_params(&p, select)?;
            let x_hat = match site {
                Site::Ln1 => layernorm_normalized(&rows(&fp_states[l]))?,
                _ => layernorm_normalized(fp_trace.residual())?,
            };
            let b = &mut w.blocks[l];
            let (ln, next) = match site {
                Site::Ln1 => (&mut b.ln1, &mut b.qkv),
                _ => (&mut b.ln2, &mut b.fc1),
            };
            let equivalence = verify_equivalence(ln, next, &bundle, &x_hat)?;
            let (ln_new, next_new) = reparameterize(ln, next, &bundle)?;
            *ln = ln_new;
            *next = next_new;
            plan.blocks[l].set(site, Quantizer::Uniform(bundle.shared_params()));
            reports.push(ReparamSiteReport {
                block: l,
                site,
                s_tilde: bundle.s_tilde,
                z_tilde: bundle.z_tilde,
                s_mean: mean(&bundle.s)?,
                s_median: median(&bundle.s)?,
                mad: score_candidates(&bundle.s)?,
                equivalence,
            });
        }
    }
    Ok(reports)
}

/// Layer-wise min/max re-fit of the post-LayerNorm quantizers on the
/// reparameterized model.
fn recalibrate_post_ln(w: &ViTWeights, plan: &mut QuantPlan, calib: &Tensor, bits: u32) -> Result<()> {
    let mut cur = calib.clone();
    for (l, bw) in w.blocks.iter().enumerate() {
        let trace = BlockTrace::new(&cur, bw, w.config.heads, None)?;
        for site in [Site::Ln1, Site::Ln2] {
            let x = trace.site_input(site).expect("activation site");
            plan.blocks[l].set(site, Quantizer::Uniform(uq_calibrate(x, bits, Granularity::LayerWise)?));
        }
        cur = trace.output();
    }
    Ok(())
}

/// State after stage 1, which does not depend on the shared-factor rule.
#[derive(Clone)]
struct ActivationStage {
    plan: QuantPlan,
    fp_states: Vec<Tensor>,
    knobs: Vec<Knob>,
    report: Vec<BlockStageReport>,
}

/// Stage 1: calibrate, then reconstruct activation quantizers only, with
/// full-precision weights.
fn activation_stage(weights: &ViTWeights, calib: &Tensor, cfg: &PipelineConfig) -> Result<ActivationStage> {
    cfg.validate()?;
    let mut plan = calibrate_model(weights, calib, &cfg.template)?;
    for bp in &mut plan.blocks {
        for s in Site::WEIGHTS {
            bp.remove(s);
        }
    }
    let batch = cfg.recon.batch.min(calib.shape()[0]);
    let fp_states = collect_block_inputs(&calib.slice_rows(0, batch)?, weights, None)?;
    let knobs = activation_knobs(&plan, cfg);
    let report = reconstruct_all(weights, &mut plan, &fp_states, &knobs, cfg)?;
    Ok(ActivationStage {
        plan,
        fp_states,
        knobs,
        report,
    })
}

/// Stages 2 and 3 and the held-out evaluation.
fn finish(
    weights: &ViTWeights,
    calib: &Tensor,
    eval: &Tensor,
    cfg: &PipelineConfig,
    s1: ActivationStage,
) -> Result<DopqOutcome> {
    let heads = weights.config.heads;
    let ActivationStage {
        mut plan,
        fp_states,
        knobs: act_knobs,
        report: stage1,
    } = s1;
    let mut w = weights.clone();
    let (mut stage2, mut stage2_safety, mut stage3) = (Vec::new(), Vec::new(), Vec::new());
    if !cfg.activations_only {
        // stage 2: channel-wise → layer-wise at every post-LayerNorm site
        let plan_before = plan.clone();
        stage2 = reparameterize_all(&mut w, &mut plan, &fp_states, cfg.select)?;
        for l in 0..w.blocks.len() {
            let before = block_forward(&fp_states[l], &weights.blocks[l], heads, plan_before.block(l))?;
            let after = block_forward(&fp_states[l], &w.blocks[l], heads, plan.block(l))?;
            let d = before.max_abs_diff(&after)?;
            stage2_safety.push(Stage2BlockReport {
                block: l,
                max_abs_delta: d,
                max_rel_delta: if d == 0.0 { 0.0 } else { d / before.max_abs() },
            });
        }
        if cfg.recalibrate {
            recalibrate_post_ln(&w, &mut plan, calib, cfg.template.bits_a)?;
        }

        // stage 3: weights, optionally together with the activations again
        calibrate_weights(&mut plan, &w, cfg.template.bits_w)?;
        let mut knobs: Vec<Knob> = Site::WEIGHTS.iter().map(|&s| Knob::Scale(s)).collect();
        if cfg.stage3_activations {
            knobs.extend(act_knobs);
        }
        stage3 = reconstruct_all(&w, &mut plan, &fp_states, &knobs, cfg)?;
    }

    let eval = evaluate(weights, &w, &plan, eval)?;
    Ok(DopqOutcome {
        weights: w,
        plan,
        report: RunReport {
            select: cfg.select,
            stage1,
            stage2,
            stage2_safety,
            stage3,
            eval,
        },
    })
}

/// The three-stage run on `weights`, calibrating on `calib` and reporting
/// on the held-out `eval` set.
pub fn run_dopq(weights: &ViTWeights, calib: &Tensor, eval: &Tensor, cfg: &PipelineConfig) -> Result<DopqOutcome> {
    let s1 = activation_stage(weights, calib, cfg)?;
    finish(weights, calib, eval, cfg, s1)
}

/// The same run with median- and mean-based shared factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbReport {
    pub mosf: RunReport,
    pub repq: RunReport,
    pub mosf_mean_block_mse: f64,
    pub repq_mean_block_mse: f64,
    /// `(mosf − repq)/repq`.
    pub rel_diff: f64,
    /// Median path no worse than the mean path, within [`TIE_REL_TOL`].
    pub median_not_worse: bool,
    /// The two paths are equal within [`TIE_REL_TOL`].
    pub tie: bool,
}

pub fn ab_compare_scaling(weights: &ViTWeights, calib: &Tensor, eval: &Tensor, cfg: &PipelineConfig) -> Result<AbReport> {
    let cfg = PipelineConfig {
        activations_only: false,
        ..cfg.clone()
    };
    // stage 1 is identical for both rules, so it runs once
    let s1 = activation_stage(weights, calib, &cfg)?;
    let run = |select| {
        let c = PipelineConfig { select, ..cfg.clone() };
        finish(weights, calib, eval, &c, s1.clone()).map(|o| o.report)
    };
    let mosf = run(ScaleSelect::Mosf)?;
    let repq = run(ScaleSelect::Repq)?;
    let (m, r) = (mosf.eval.mean_block_mse, repq.eval.mean_block_mse);
    let rel_diff = if r == 0.0 { 0.0 } else { (m - r) / r };
    Ok(AbReport {
        mosf_mean_block_mse: m,
        repq_mean_block_mse: r,
        rel_diff,
        median_not_worse: rel_diff <= TIE_REL_TOL,
        tie: rel_diff.abs() <= TIE_REL_TOL,
        mosf,
        repq,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{PlanTemplate, ReconConfig};
    use crate::toyvit::{gaussian_tokens, init_weights, ViTConfig};

    fn tiny() -> (ViTWeights, Tensor, Tensor) {
        let cfg = ViTConfig {
            dim: 16,
            heads: 2,
            tokens: 8,
            ..ViTConfig::lab(7)
        };
        let w = init_weights(&cfg).unwrap();
        (w, gaussian_tokens(&cfg, 16, 1).unwrap(), gaussian_tokens(&cfg, 32, 2).unwrap())
    }

    fn quick(bits: u32) -> PipelineConfig {
        PipelineConfig {
            template: PlanTemplate {
                bits_w: bits,
                bits_a: bits,
                tan_sample: 1024,
                ..PlanTemplate::default()
            },
            recon: ReconConfig {
                passes: 1,
                grid_points: 9,
                batch: 8,
                ..ReconConfig::default()
            },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn report_contract() {
        let (w, calib, eval) = tiny();
        let out = run_dopq(&w, &calib, &eval, &quick(4)).unwrap();
        let r = &out.report;
        assert_eq!(r.stage1.len(), 2);
        assert_eq!(r.stage3.len(), 2);
        assert_eq!(r.stage2.len(), 4);
        assert!(r.traces_nonincreasing());
        for s in &r.stage2 {
            assert!(s.equivalence.holds(1e-9), "{:?}", s.equivalence);
            assert!(s.mad.median_is_minimal(1e-12));
        }
        for s in &r.stage2_safety {
            assert!(s.max_rel_delta <= 1e-9, "{s:?}");
        }
        assert!(r.eval.top1_agreement > 0.0 && r.eval.top1_agreement <= 1.0);
    }

    #[test]
    fn runs_are_deterministic() {
        let (w, calib, eval) = tiny();
        let a = run_dopq(&w, &calib, &eval, &quick(4)).unwrap().report;
        let b = run_dopq(&w, &calib, &eval, &quick(4)).unwrap().report;
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn ab_paths_match_separate_runs() {
        let (w, calib, eval) = tiny();
        let cfg = quick(4);
        let ab = ab_compare_scaling(&w, &calib, &eval, &cfg).unwrap();
        let repq = PipelineConfig {
            select: ScaleSelect::Repq,
            ..cfg.clone()
        };
        assert_eq!(ab.mosf, run_dopq(&w, &calib, &eval, &cfg).unwrap().report);
        assert_eq!(ab.repq, run_dopq(&w, &calib, &eval, &repq).unwrap().report);
        assert_eq!(ab.tie, ab.rel_diff.abs() <= TIE_REL_TOL);
    }

    #[test]
    fn sixteen_bits_agree_fully() {
        let (w, calib, eval) = tiny();
        let r = run_dopq(&w, &calib, &eval, &quick(16)).unwrap().report;
        assert_eq!(r.eval.top1_agreement, 1.0);
    }
}
