use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ReconConfig;
use crate::error::{dim_err, Result};
use crate::quantizers::{tan_feasible, Quantizer, TanParams};
use crate::tensor::Tensor;
use crate::toyvit::{BlockPlan, BlockTrace, BlockWeights, Site};

/// One block's calibration input and its full-precision output.
#[derive(Debug, Clone)]
pub struct BlockRecord {
    pub index: usize,
    pub input: Tensor,
    pub target: Tensor,
}

impl BlockRecord {
    pub fn new(index: usize, input: Tensor, target: Tensor) -> Result<Self> {
        if input.shape() != target.shape() {
            return Err(dim_err!(
                "block {index}: input {:?} vs target {:?}",
                input.shape(),
                target.shape()
            ));
        }
        Ok(Self { index, input, target })
    }

    /// `‖target − output‖₂ / √count`: the Euclidean gap normalized so that
    /// duplicating the batch leaves it unchanged.
    pub fn loss_of(&self, output: &Tensor) -> Result<f64> {
        Ok(self.target.mse(output)?.sqrt())
    }
}

/// Block loss of the quantized block (`plan`) against the record's target.
pub fn block_loss(rec: &BlockRecord, w: &BlockWeights, heads: usize, plan: Option<&BlockPlan>) -> Result<f64> {
    rec.loss_of(&BlockTrace::new(&rec.input, w, heads, plan)?.output())
}

/// A continuous parameter tuned by reconstruction. Every knob is searched
/// multiplicatively around its current value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Knob {
    /// All scales of the site's quantizer, jointly.
    Scale(Site),
    /// Curvature `a` of the post-Softmax tan quantizer.
    TanCurvature,
    /// Focus `b` of the post-Softmax tan quantizer.
    TanFocus,
}

impl Knob {
    pub fn site(self) -> Site {
        match self {
            Knob::Scale(s) => s,
            Knob::TanCurvature | Knob::TanFocus => Site::Softmax,
        }
    }

    /// The quantizer with this knob multiplied by `m`, or `None` when the
    /// result is not a valid quantizer.
    pub fn apply(self, q: &Quantizer, m: f64) -> Option<Quantizer> {
        match (self, q) {
            (Knob::Scale(_), q) => Some(q.with_scale_factor(m)),
            (Knob::TanCurvature, Quantizer::Tan(tp)) => tan_with(tp, tp.a * m, tp.b_focus),
            (Knob::TanFocus, Quantizer::Tan(tp)) => tan_with(tp, tp.a, tp.b_focus * m),
            _ => None,
        }
    }
}

fn tan_with(tp: &TanParams, a: f64, b: f64) -> Option<Quantizer> {
    tan_feasible(a, b).then(|| {
        Quantizer::Tan(TanParams {
            a,
            b_focus: b,
            inner: tp.inner.clone(),
        })
    })
}

/// Loss trace of one block's reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconOutcome {
    /// Loss before reconstruction followed by the loss after each accepted
    /// update; nonincreasing by construction.
    pub trace: Vec<f64>,
    pub accepted: usize,
    pub evaluations: usize,
    pub passes_run: usize,
}

impl ReconOutcome {
    pub fn initial(&self) -> f64 {
        self.trace[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.trace.last().expect("trace starts with the initial loss")
    }

    pub fn is_nonincreasing(&self) -> bool {
        self.trace.windows(2).all(|w| w[1] <= w[0])
    }
}

/// Evaluates `multipliers` for one knob in parallel and returns the best
/// `(loss, multiplier)`; ties go to the smallest multiplier.
fn best_candidate(
    base: &BlockTrace,
    rec: &BlockRecord,
    w: &BlockWeights,
    plan: &BlockPlan,
    knob: Knob,
    current: &Quantizer,
    multipliers: &[f64],
) -> Result<(Option<(f64, f64)>, usize)> {
    let step = knob.site().first_step();
    let scored: Vec<Option<(f64, f64)>> = multipliers
        .par_iter()
        .map(|&m| {
            let Some(q) = knob.apply(current, m) else {
                return Ok(None);
            };
            let mut cand = plan.clone();
            cand.set(knob.site(), q);
            let loss = rec.loss_of(&base.output_from(step, w, Some(&cand))?)?;
            Ok(Some((loss, m)))
        })
        .collect::<Result<_>>()?;
    let evaluated = scored.iter().flatten().count();
    let best = scored
        .into_iter()
        .flatten()
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    Ok((best, evaluated))
}

/// Coordinate descent over `knobs`: for each knob, the coarse multiplicative
/// grid and then a finer grid around its optimum are evaluated, and the best
/// candidate is kept only if it strictly lowers the block loss.
pub fn reconstruct_block(
    rec: &BlockRecord,
    w: &BlockWeights,
    heads: usize,
    plan: &mut BlockPlan,
    knobs: &[Knob],
    cfg: &ReconConfig,
) -> Result<ReconOutcome> {
    cfg.validate()?;
    let mut base = BlockTrace::new(&rec.input, w, heads, Some(plan))?;
    let mut current = rec.loss_of(&base.output())?;
    let mut out = ReconOutcome {
        trace: vec![current],
        accepted: 0,
        evaluations: 0,
        passes_run: 0,
    };
    let coarse = cfg.coarse_multipliers();
    let fine = cfg.fine_multipliers();
    for _ in 0..cfg.passes {
        out.passes_run += 1;
        let mut changed = false;
        for &knob in knobs {
            let Some(q) = plan.get(knob.site()).cloned() else {
                continue;
            };
            let (coarse_best, n) = best_candidate(&base, rec, w, plan, knob, &q, &coarse)?;
            out.evaluations += n;
            let Some((mut best_loss, mut best_m)) = coarse_best else {
                continue;
            };
            if cfg.refine {
                let around: Vec<f64> = fine.iter().map(|f| f * best_m).collect();
                let (fine_best, n) = best_candidate(&base, rec, w, plan, knob, &q, &around)?;
                out.evaluations += n;
                if let Some((l, m)) = fine_best {
                    if l < best_loss || (l == best_loss && m < best_m) {
                        (best_loss, best_m) = (l, m);
                    }
                }
            }
            if best_loss < current {
                plan.set(knob.site(), knob.apply(&q, best_m).expect("candidate was valid"));
                base.advance(knob.site().first_step(), w, Some(plan))?;
                current = rec.loss_of(&base.output())?;
                out.trace.push(current);
                out.accepted += 1;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(out)
}
