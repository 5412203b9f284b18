use std::borrow::Cow;

use rayon::prelude::*;

use super::{BlockPlan, BlockWeights, QuantPlan, Site, ViTWeights, LN_EPS};
use crate::error::{dim_err, Result};
use crate::reparam::{LayerNormAffine, LinearLayer};
use crate::tensor::{matmul, Tensor};

/// Sequences per chunk when a batch is split for parallel evaluation.
const CHUNK: usize = 32;

/// Row-wise normalization over the last axis (population variance, ε = 1e-6),
/// without the affine.
pub fn layernorm_normalized(x: &Tensor) -> Result<Tensor> {
    let d = x.last_dim();
    if d < 2 {
        return Err(dim_err!("LayerNorm over a last axis of size {d}"));
    }
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        out.extend(row.iter().map(|v| (v - mean) * inv));
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn layernorm(x: &Tensor, affine: &LayerNormAffine) -> Result<Tensor> {
    affine.apply(&layernorm_normalized(x)?)
}

/// Max-subtracted softmax over the last axis.
pub fn softmax(x: &Tensor) -> Result<Tensor> {
    let n = x.last_dim();
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(n) {
        softmax_row(row, &mut out);
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn softmax_row(row: &[f64], out: &mut Vec<f64>) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let start = out.len();
    out.extend(row.iter().map(|v| (v - m).exp()));
    let sum: f64 = out[start..].iter().sum();
    out[start..].iter_mut().for_each(|v| *v /= sum);
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn weight_for<'a>(layer: &'a LinearLayer, plan: Option<&BlockPlan>, site: Site) -> Result<Cow<'a, Tensor>> {
    match plan.and_then(|p| p.get(site)) {
        Some(q) => Ok(Cow::Owned(q.fake_quant(&layer.weight)?)),
        None => Ok(Cow::Borrowed(&layer.weight)),
    }
}

fn apply(plan: Option<&BlockPlan>, site: Site, x: Tensor) -> Result<Tensor> {
    match plan {
        Some(p) => p.apply(site, x),
        None => Ok(x),
    }
}

fn apply_ref<'a>(plan: Option<&BlockPlan>, site: Site, x: &'a Tensor) -> Result<Cow<'a, Tensor>> {
    match plan.and_then(|p| p.get(site)) {
        Some(q) => Ok(Cow::Owned(q.fake_quant(x)?)),
        None => Ok(Cow::Borrowed(x)),
    }
}

fn linear(x: &Tensor, layer: &LinearLayer, plan: Option<&BlockPlan>, site: Site) -> Result<Tensor> {
    let w = weight_for(layer, plan, site)?;
    let mut y = matmul(x, &w)?;
    for row in y.data_mut().chunks_mut(layer.out_dim()) {
        row.iter_mut().zip(&layer.bias).for_each(|(v, b)| *v += b);
    }
    Ok(y)
}

/// Forward stages of a block, in order. Re-running from a stage recomputes
/// that stage and everything after it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Step {
    Norm1,
    Qkv,
    Scores,
    Mix,
    Proj,
    Norm2,
    Fc1,
    Fc2,
}

/// Every intermediate of one block forward pass, so a pass can be resumed
/// from any [`Step`] after a quantizer downstream of it changes.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    shape: Vec<usize>,
    batch: usize,
    tokens: usize,
    heads: usize,
    /// Block input as rows `[B·N, D]`.
    x: Tensor,
    /// Quantized first LayerNorm output.
    a1: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    /// Full-precision attention maps `[B, h, N, N]`.
    probs: Tensor,
    /// Concatenated head outputs, before the projection's input quantizer.
    mix: Tensor,
    /// Residual stream after attention.
    resid: Tensor,
    /// Quantized second LayerNorm output.
    a2: Tensor,
    /// GELU output, before its quantizer.
    hidden: Tensor,
    out: Tensor,
}

fn placeholder() -> Tensor {
    Tensor::from_parts(vec![0], Vec::new())
}

impl BlockTrace {
    /// Full forward pass of `x` (`[B, N, D]` or `[N, D]`).
    pub fn new(x: &Tensor, w: &BlockWeights, heads: usize, plan: Option<&BlockPlan>) -> Result<Self> {
        let d = w.ln1.dim();
        if x.ndim() < 2 || x.last_dim() != d || d % heads != 0 {
            return Err(dim_err!("block of width {d} with {heads} heads given {:?}", x.shape()));
        }
        let tokens = x.shape()[x.ndim() - 2];
        let batch = x.len() / (tokens * d);
        let mut t = Self {
            shape: x.shape().to_vec(),
            batch,
            tokens,
            heads,
            x: Tensor::from_parts(vec![batch * tokens, d], x.data().to_vec()),
            a1: placeholder(),
            q: placeholder(),
            k: placeholder(),
            v: placeholder(),
            probs: placeholder(),
            mix: placeholder(),
            resid: placeholder(),
            a2: placeholder(),
            hidden: placeholder(),
            out: placeholder(),
        };
        t.advance(Step::Norm1, w, plan)?;
        Ok(t)
    }

    /// Recomputes `from` and every later step under `w` and `plan`.
    pub fn advance(&mut self, from: Step, w: &BlockWeights, plan: Option<&BlockPlan>) -> Result<()> {
        if from <= Step::Norm1 {
            self.a1 = apply(plan, Site::Ln1, layernorm(&self.x, &w.ln1)?)?;
        }
        if from <= Step::Qkv {
            let qkv = linear(&self.a1, &w.qkv, plan, Site::QkvW)?;
            let (q, k, v) = split_qkv(&qkv, w.ln1.dim());
            self.q = apply(plan, Site::Q, q)?;
            self.k = apply(plan, Site::K, k)?;
            self.v = apply(plan, Site::V, v)?;
        }
        if from <= Step::Scores {
            self.probs = attention_maps(&self.q, &self.k, self.batch, self.tokens, self.heads);
        }
        if from <= Step::Mix {
            let p = apply_ref(plan, Site::Softmax, &self.probs)?;
            self.mix = mix_heads(&p, &self.v, self.batch, self.tokens, self.heads);
        }
        if from <= Step::Proj {
            let m = apply_ref(plan, Site::ProjIn, &self.mix)?;
            let y = linear(&m, &w.proj, plan, Site::ProjW)?;
            self.resid = add(&self.x, &y);
        }
        if from <= Step::Norm2 {
            self.a2 = apply(plan, Site::Ln2, layernorm(&self.resid, &w.ln2)?)?;
        }
        if from <= Step::Fc1 {
            self.hidden = linear(&self.a2, &w.fc1, plan, Site::Fc1W)?.map(gelu);
        }
        let h = apply_ref(plan, Site::Fc2In, &self.hidden)?;
        let y = linear(&h, &w.fc2, plan, Site::Fc2W)?;
        self.out = add(&self.resid, &y);
        Ok(())
    }

    /// Output of a pass resumed from `from`, leaving this trace untouched.
    pub fn output_from(&self, from: Step, w: &BlockWeights, plan: Option<&BlockPlan>) -> Result<Tensor> {
        // only the intermediates the resumed pass reads are copied
        let keep = |step: Step, t: &Tensor| if step < from { t.clone() } else { placeholder() };
        let mut t = Self {
            shape: self.shape.clone(),
            batch: self.batch,
            tokens: self.tokens,
            heads: self.heads,
            x: if from <= Step::Proj { self.x.clone() } else { placeholder() },
            a1: keep(Step::Norm1, &self.a1),
            q: keep(Step::Qkv, &self.q),
            k: keep(Step::Qkv, &self.k),
            v: keep(Step::Qkv, &self.v),
            probs: keep(Step::Scores, &self.probs),
            mix: keep(Step::Mix, &self.mix),
            resid: keep(Step::Proj, &self.resid),
            a2: keep(Step::Norm2, &self.a2),
            hidden: keep(Step::Fc1, &self.hidden),
            out: placeholder(),
        };
        t.advance(from, w, plan)?;
        Ok(Tensor::from_parts(t.shape, t.out.into_data()))
    }

    /// Block output in the input's shape.
    pub fn output(&self) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.out.data().to_vec())
    }

    /// Activations a site's quantizer is applied to, as seen in this pass
    /// (un-quantized when the trace ran without a plan). `None` for weights.
    pub fn site_input(&self, site: Site) -> Option<&Tensor> {
        match site {
            Site::Ln1 => Some(&self.a1),
            Site::Q => Some(&self.q),
            Site::K => Some(&self.k),
            Site::V => Some(&self.v),
            Site::Softmax => Some(&self.probs),
            Site::ProjIn => Some(&self.mix),
            Site::Ln2 => Some(&self.a2),
            Site::Fc2In => Some(&self.hidden),
            _ => None,
        }
    }

    /// Input of the second LayerNorm (residual after attention), `[B·N, D]`.
    pub fn residual(&self) -> &Tensor {
        &self.resid
    }

    pub fn input_rows(&self) -> &Tensor {
        &self.x
    }
}

fn add(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn split_qkv(qkv: &Tensor, d: usize) -> (Tensor, Tensor, Tensor) {
    let rows = qkv.shape()[0];
    let mut parts = [
        Vec::with_capacity(rows * d),
        Vec::with_capacity(rows * d),
        Vec::with_capacity(rows * d),
    ];
    for row in qkv.data().chunks(3 * d) {
        for (p, chunk) in parts.iter_mut().zip(row.chunks(d)) {
            p.extend_from_slice(chunk);
        }
    }
    let [q, k, v] = parts;
    (
        Tensor::from_parts(vec![rows, d], q),
        Tensor::from_parts(vec![rows, d], k),
        Tensor::from_parts(vec![rows, d], v),
    )
}

/// `softmax(Q_h K_hᵀ / √D_h)` for every sequence and head → `[B, h, N, N]`.
fn attention_maps(q: &Tensor, k: &Tensor, batch: usize, tokens: usize, heads: usize) -> Tensor {
    let d = q.shape()[1];
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qd, kd) = (q.data(), k.data());
    let mut out = Vec::with_capacity(batch * heads * tokens * tokens);
    let mut scores = vec![0.0; tokens];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..tokens {
                let qi = &qd[(b * tokens + i) * d + h * dh..][..dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &kd[(b * tokens + j) * d + h * dh..][..dh];
                    *s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                }
                softmax_row(&scores, &mut out);
            }
        }
    }
    Tensor::from_parts(vec![batch, heads, tokens, tokens], out)
}

/// `P_h V_h` per head, heads concatenated along channels → `[B·N, D]`.
fn mix_heads(p: &Tensor, v: &Tensor, batch: usize, tokens: usize, heads: usize) -> Tensor {
    let d = v.shape()[1];
    let dh = d / heads;
    let (pd, vd) = (p.data(), v.data());
    let mut out = vec![0.0; batch * tokens * d];
    for b in 0..batch {
        for h in 0..heads {
            for i in 0..tokens {
                let prow = &pd[((b * heads + h) * tokens + i) * tokens..][..tokens];
                let o = &mut out[(b * tokens + i) * d + h * dh..][..dh];
                for (j, &pij) in prow.iter().enumerate() {
                    let vj = &vd[(b * tokens + j) * d + h * dh..][..dh];
                    for (oc, vc) in o.iter_mut().zip(vj) {
                        *oc += pij * vc;
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![batch * tokens, d], out)
}

fn check_block_input(h: &Tensor, d: usize) -> Result<(usize, usize)> {
    if h.ndim() < 2 || h.last_dim() != d {
        return Err(dim_err!("expected [.., N, {d}], got {:?}", h.shape()));
    }
    let tokens = h.shape()[h.ndim() - 2];
    Ok((h.len() / (tokens * d), tokens))
}

/// Multi-head self-attention on already-normalized input `h`, including
/// the output projection; the `Ln1` site quantizes `h` first.
pub fn msa_forward(h: &Tensor, w: &BlockWeights, heads: usize, plan: Option<&BlockPlan>) -> Result<Tensor> {
    let d = w.ln1.dim();
    let (batch, tokens) = check_block_input(h, d)?;
    if d % heads != 0 {
        return Err(dim_err!("width {d} not divisible by {heads} heads"));
    }
    let rows = Tensor::from_parts(vec![batch * tokens, d], h.data().to_vec());
    let a = apply(plan, Site::Ln1, rows)?;
    let qkv = linear(&a, &w.qkv, plan, Site::QkvW)?;
    let (q, k, v) = split_qkv(&qkv, d);
    let q = apply(plan, Site::Q, q)?;
    let k = apply(plan, Site::K, k)?;
    let v = apply(plan, Site::V, v)?;
    let p = apply(plan, Site::Softmax, attention_maps(&q, &k, batch, tokens, heads))?;
    let m = apply(plan, Site::ProjIn, mix_heads(&p, &v, batch, tokens, heads))?;
    let y = linear(&m, &w.proj, plan, Site::ProjW)?;
    Ok(Tensor::from_parts(h.shape().to_vec(), y.into_data()))
}

/// `GELU(hW₁ + b₁)W₂ + b₂` on already-normalized input `h`; the `Ln2` site
/// quantizes `h` first.
pub fn mlp_forward(h: &Tensor, w: &BlockWeights, plan: Option<&BlockPlan>) -> Result<Tensor> {
    let d = w.ln2.dim();
    let (batch, tokens) = check_block_input(h, d)?;
    let rows = Tensor::from_parts(vec![batch * tokens, d], h.data().to_vec());
    let a = apply(plan, Site::Ln2, rows)?;
    let u = linear(&a, &w.fc1, plan, Site::Fc1W)?.map(gelu);
    let u = apply(plan, Site::Fc2In, u)?;
    let y = linear(&u, &w.fc2, plan, Site::Fc2W)?;
    Ok(Tensor::from_parts(h.shape().to_vec(), y.into_data()))
}

/// `Y = X + MSA(LN₁(X))`, `X' = Y + MLP(LN₂(Y))`.
pub fn block_forward(x: &Tensor, w: &BlockWeights, heads: usize, plan: Option<&BlockPlan>) -> Result<Tensor> {
    Ok(BlockTrace::new(x, w, heads, plan)?.output())
}

fn run_blocks(x: &Tensor, weights: &ViTWeights, plan: Option<&QuantPlan>, keep: bool) -> Result<Vec<Tensor>> {
    let mut states = Vec::with_capacity(weights.blocks.len() + 1);
    let mut cur = x.clone();
    for (l, w) in weights.blocks.iter().enumerate() {
        let bp = plan.and_then(|p| p.block(l));
        let next = block_forward(&cur, w, weights.config.heads, bp)?;
        if keep {
            states.push(cur);
        }
        cur = next;
    }
    states.push(cur);
    Ok(states)
}

fn split_batches(x: &Tensor) -> Result<Vec<Tensor>> {
    let b = x.shape()[0];
    (0..b)
        .step_by(CHUNK)
        .map(|s| x.slice_rows(s, (s + CHUNK).min(b)))
        .collect()
}

/// Logits `[B, C]` for token sequences `[B, N, D]`: the blocks, mean pooling
/// over tokens, and the linear head. The batch is split into fixed-size
/// chunks evaluated in parallel; results do not depend on thread count.
pub fn model_forward(x: &Tensor, weights: &ViTWeights, plan: Option<&QuantPlan>) -> Result<Tensor> {
    let cfg = &weights.config;
    if x.ndim() != 3 || x.shape()[1] != cfg.tokens || x.shape()[2] != cfg.dim {
        return Err(dim_err!(
            "expected [B, {}, {}], got {:?}",
            cfg.tokens,
            cfg.dim,
            x.shape()
        ));
    }
    let parts: Vec<Tensor> = split_batches(x)?
        .par_iter()
        .map(|chunk| {
            let out = run_blocks(chunk, weights, plan, false)?.pop().expect("final state");
            let (b, n, d) = (chunk.shape()[0], cfg.tokens, cfg.dim);
            let mut pooled = vec![0.0; b * d];
            for (s, seq) in out.data().chunks(n * d).enumerate() {
                for tok in seq.chunks(d) {
                    for (p, v) in pooled[s * d..(s + 1) * d].iter_mut().zip(tok) {
                        *p += v;
                    }
                }
            }
            pooled.iter_mut().for_each(|p| *p /= n as f64);
            weights.head.forward(&Tensor::new(vec![b, d], pooled)?)
        })
        .collect::<Result<_>>()?;
    Tensor::concat_rows(&parts)
}

/// Inputs of every block followed by the last block's output (`L + 1`
/// tensors of shape `[B, N, D]`).
pub fn collect_block_inputs(x: &Tensor, weights: &ViTWeights, plan: Option<&QuantPlan>) -> Result<Vec<Tensor>> {
    let per_chunk: Vec<Vec<Tensor>> = split_batches(x)?
        .par_iter()
        .map(|chunk| run_blocks(chunk, weights, plan, true))
        .collect::<Result<_>>()?;
    (0..=weights.blocks.len())
        .map(|l| Tensor::concat_rows(&per_chunk.iter().map(|c| c[l].clone()).collect::<Vec<_>>()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizers::{Granularity, Quantizer};
    use crate::quantizers::uq_calibrate;
    use crate::toyvit::{gaussian_tokens, init_weights, ViTConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn layernorm_examples() {
        let y = layernorm_normalized(&Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap()).unwrap();
        let expect = 1.0 / (1.0 + LN_EPS).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-15 && (y.data()[1] - expect).abs() < 1e-15);

        // the ε term shrinks the variance by var/(var + ε), so rows need a
        // raw variance of order 1 or more for the 1e-6 bound
        let x = rand_tensor(vec![7, 9], 1).map(|v| 3.0 * v);
        let n = layernorm_normalized(&x).unwrap();
        for row in n.data().chunks(9) {
            let m = row.iter().sum::<f64>() / 9.0;
            let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 9.0;
            assert!(m.abs() <= 1e-9 && (v - 1.0).abs() <= 1e-6);
        }
        let again = layernorm(&n, &LayerNormAffine::identity(9)).unwrap();
        assert!(again.max_abs_diff(&n).unwrap() <= 1e-6);
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&Tensor::new(vec![1, 4], vec![0.3; 4]).unwrap()).unwrap();
        assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let mut row = vec![0.0; 16];
        row[3] = 50.0;
        let p = softmax(&Tensor::new(vec![1, 16], row).unwrap()).unwrap();
        assert!(p.data()[3] >= 1.0 - 1e-6);
        let x = rand_tensor(vec![5, 8], 2);
        let shifted = Tensor::new(vec![5, 8], x.data().iter().map(|v| v + 7.5).collect()).unwrap();
        let (a, b) = (softmax(&x).unwrap(), softmax(&shifted).unwrap());
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
        for r in a.data().chunks(8) {
            assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(r.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() <= 1e-6);
        assert!(gelu(-10.0).abs() <= 1e-6);
    }

    fn small_cfg() -> ViTConfig {
        ViTConfig {
            dim: 8,
            heads: 2,
            tokens: 5,
            layers: 2,
            classes: 3,
            ..ViTConfig::lab(4)
        }
    }

    #[test]
    fn mlp_matches_scalar_oracle() {
        let cfg = small_cfg();
        let w = init_weights(&cfg).unwrap();
        let b = &w.blocks[0];
        let h = rand_tensor(vec![5, 8], 3);
        let got = mlp_forward(&h, b, None).unwrap();
        let (d, hid) = (8, 32);
        for r in 0..5 {
            let row = &h.data()[r * d..(r + 1) * d];
            let u: Vec<f64> = (0..hid)
                .map(|j| {
                    let s: f64 = (0..d).map(|i| row[i] * b.fc1.weight.data()[i * hid + j]).sum();
                    gelu(s + b.fc1.bias[j])
                })
                .collect();
            for c in 0..d {
                let s: f64 = (0..hid).map(|j| u[j] * b.fc2.weight.data()[j * d + c]).sum::<f64>() + b.fc2.bias[c];
                assert!((s - got.data()[r * d + c]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn single_token_attention_is_value_path() {
        let cfg = ViTConfig {
            dim: 6,
            heads: 1,
            tokens: 1,
            ..small_cfg()
        };
        let w = init_weights(&cfg).unwrap();
        let b = &w.blocks[0];
        let h = rand_tensor(vec![1, 6], 5);
        let got = msa_forward(&h, b, 1, None).unwrap();
        // one token: attention weight 1, output = (h W_v + b_v) W_o + b_o
        let d = 6;
        let v: Vec<f64> = (0..d)
            .map(|c| (0..d).map(|i| h.data()[i] * b.qkv.weight.data()[i * 3 * d + 2 * d + c]).sum::<f64>() + b.qkv.bias[2 * d + c])
            .collect();
        for c in 0..d {
            let o: f64 = (0..d).map(|i| v[i] * b.proj.weight.data()[i * d + c]).sum::<f64>() + b.proj.bias[c];
            assert!((o - got.data()[c]).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_branches_make_block_identity() {
        let cfg = small_cfg();
        let mut w = init_weights(&cfg).unwrap();
        let b = &mut w.blocks[0];
        b.proj.weight = Tensor::zeros(vec![8, 8]);
        b.fc2.weight = Tensor::zeros(vec![32, 8]);
        let x = rand_tensor(vec![3, 5, 8], 6);
        assert_eq!(block_forward(&x, b, 2, None).unwrap(), x);
    }

    #[test]
    fn trace_resume_matches_full_pass() {
        let cfg = small_cfg();
        let w = init_weights(&cfg).unwrap();
        let x = gaussian_tokens(&cfg, 4, 9).unwrap();
        let base = BlockTrace::new(&x, &w.blocks[0], 2, None).unwrap();
        let mut plan = BlockPlan::default();
        let probs = base.site_input(Site::Softmax).unwrap().clone();
        plan.set(Site::Softmax, Quantizer::Uniform(uq_calibrate(&probs, 3, Granularity::LayerWise).unwrap()));
        let resumed = base.output_from(Site::Softmax.first_step(), &w.blocks[0], Some(&plan)).unwrap();
        let full = block_forward(&x, &w.blocks[0], 2, Some(&plan)).unwrap();
        assert_eq!(resumed, full);
        assert!(resumed.max_abs_diff(&base.output()).unwrap() > 0.0);
    }

    #[test]
    fn block_composition_matches_msa_and_mlp() {
        let cfg = small_cfg();
        let w = init_weights(&cfg).unwrap();
        let b = &w.blocks[1];
        let x = rand_tensor(vec![2, 5, 8], 8);
        let y = add(&x, &msa_forward(&layernorm(&x, &b.ln1).unwrap(), b, 2, None).unwrap());
        let out = add(&y, &mlp_forward(&layernorm(&y, &b.ln2).unwrap(), b, None).unwrap());
        assert!(out.max_abs_diff(&block_forward(&x, b, 2, None).unwrap()).unwrap() <= 1e-12);
    }

    #[test]
    fn chunked_forward_is_chunk_independent() {
        let cfg = small_cfg();
        let w = init_weights(&cfg).unwrap();
        let x = gaussian_tokens(&cfg, 70, 1).unwrap();
        let all = model_forward(&x, &w, None).unwrap();
        let one = model_forward(&x.slice_rows(40, 41).unwrap(), &w, None).unwrap();
        assert_eq!(&all.data()[40 * 3..41 * 3], one.data());
        let states = collect_block_inputs(&x, &w, None).unwrap();
        assert_eq!(states.len(), 3);
        assert_eq!(states[0], x);
    }
}
