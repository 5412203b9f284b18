use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::forward::Step;
use crate::error::Result;
use crate::quantizers::Quantizer;
use crate::tensor::Tensor;

/// A fake-quant insertion point inside one block.
///
/// Activation sites see 2-D `[B·N, width]` tensors (channels on axis 1),
/// except `Softmax`, which sees the attention maps `[B, h, N, N]`. Weight
/// sites see `W` stored `[in, out]`; channel-wise weight parameters run
/// along axis 1, one per output column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    /// Output of the first LayerNorm (input of the qkv projection).
    Ln1,
    Q,
    K,
    V,
    /// Attention probabilities.
    Softmax,
    /// Concatenated head outputs (input of the output projection).
    ProjIn,
    /// Output of the second LayerNorm (input of the first MLP layer).
    Ln2,
    /// GELU output (input of the second MLP layer).
    Fc2In,
    QkvW,
    ProjW,
    Fc1W,
    Fc2W,
}

impl Site {
    pub const ACTIVATIONS: [Site; 8] = [
        Site::Ln1,
        Site::Q,
        Site::K,
        Site::V,
        Site::Softmax,
        Site::ProjIn,
        Site::Ln2,
        Site::Fc2In,
    ];

    pub const WEIGHTS: [Site; 4] = [Site::QkvW, Site::ProjW, Site::Fc1W, Site::Fc2W];

    pub fn is_weight(self) -> bool {
        Self::WEIGHTS.contains(&self)
    }

    /// Post-LayerNorm sites that are reparameterized.
    pub fn is_post_ln(self) -> bool {
        matches!(self, Site::Ln1 | Site::Ln2)
    }

    /// First forward step whose output depends on this site's quantizer.
    pub fn first_step(self) -> Step {
        match self {
            Site::Ln1 => Step::Norm1,
            Site::Q | Site::K | Site::V | Site::QkvW => Step::Qkv,
            Site::Softmax => Step::Mix,
            Site::ProjIn | Site::ProjW => Step::Proj,
            Site::Ln2 => Step::Norm2,
            Site::Fc1W => Step::Fc1,
            Site::Fc2In | Site::Fc2W => Step::Fc2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Site::Ln1 => "ln1",
            Site::Q => "q",
            Site::K => "k",
            Site::V => "v",
            Site::Softmax => "softmax",
            Site::ProjIn => "proj_in",
            Site::Ln2 => "ln2",
            Site::Fc2In => "fc2_in",
            Site::QkvW => "qkv_w",
            Site::ProjW => "proj_w",
            Site::Fc1W => "fc1_w",
            Site::Fc2W => "fc2_w",
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Quantizers of one block; a missing site runs in full precision.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockPlan {
    pub sites: BTreeMap<Site, Quantizer>,
}

impl BlockPlan {
    pub fn get(&self, site: Site) -> Option<&Quantizer> {
        self.sites.get(&site)
    }

    pub fn set(&mut self, site: Site, q: Quantizer) {
        self.sites.insert(site, q);
    }

    pub fn remove(&mut self, site: Site) -> Option<Quantizer> {
        self.sites.remove(&site)
    }

    /// Fake-quantizes `x` if the site is quantized; otherwise passes it through.
    pub fn apply(&self, site: Site, x: Tensor) -> Result<Tensor> {
        match self.sites.get(&site) {
            Some(q) => q.fake_quant(&x),
            None => Ok(x),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QuantPlan {
    pub blocks: Vec<BlockPlan>,
}

impl QuantPlan {
    pub fn empty(layers: usize) -> Self {
        Self {
            blocks: vec![BlockPlan::default(); layers],
        }
    }

    pub fn block(&self, l: usize) -> Option<&BlockPlan> {
        self.blocks.get(l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantizers::QuantParams;

    #[test]
    fn plan_json_round_trip() {
        let mut p = BlockPlan::default();
        p.set(Site::Softmax, Quantizer::Uniform(QuantParams::layer_wise(4, 0.1, 0).unwrap()));
        p.set(Site::Fc2W, Quantizer::Uniform(QuantParams::layer_wise(3, 0.7, 2).unwrap()));
        let plan = QuantPlan { blocks: vec![p, BlockPlan::default()] };
        let json = serde_json::to_string(&plan).unwrap();
        assert!(json.contains("\"softmax\""));
        let back: QuantPlan = serde_json::from_str(&json).unwrap();
        assert_eq!(back, plan);
    }

    #[test]
    fn steps_follow_site_order() {
        assert!(Site::Ln1.first_step() < Site::Softmax.first_step());
        assert!(Site::Softmax.first_step() < Site::Fc2W.first_step());
        assert!(Site::WEIGHTS.iter().all(|s| s.is_weight()));
        assert!(!Site::ACTIVATIONS.iter().any(|s| s.is_weight()));
    }
}
