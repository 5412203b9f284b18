use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BlockWeights, ViTConfig, ViTWeights};
use crate::dqt;
use crate::error::{Error, Result};
use crate::reparam::{LayerNormAffine, LinearLayer};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Model config plus tensor name → file (relative to the manifest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsManifest {
    pub config: ViTConfig,
    pub tensors: BTreeMap<String, String>,
}

fn vec_tensor(v: &[f64]) -> Result<Tensor> {
    Tensor::from_vec(v.to_vec())
}

fn named_tensors(w: &ViTWeights) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    for (l, b) in w.blocks.iter().enumerate() {
        for (name, ln) in [("ln1", &b.ln1), ("ln2", &b.ln2)] {
            out.push((format!("blocks.{l}.{name}.gamma"), vec_tensor(&ln.gamma)?));
            out.push((format!("blocks.{l}.{name}.beta"), vec_tensor(&ln.beta)?));
        }
        for (name, lin) in [("qkv", &b.qkv), ("proj", &b.proj), ("fc1", &b.fc1), ("fc2", &b.fc2)] {
            out.push((format!("blocks.{l}.{name}.weight"), lin.weight.clone()));
            out.push((format!("blocks.{l}.{name}.bias"), vec_tensor(&lin.bias)?));
        }
    }
    out.push(("head.weight".into(), w.head.weight.clone()));
    out.push(("head.bias".into(), vec_tensor(&w.head.bias)?));
    Ok(out)
}

/// Writes one `DQT1` file per tensor into `dir` plus `manifest.json`.
pub fn save_weights(dir: impl AsRef<Path>, w: &ViTWeights) -> Result<WeightsManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut tensors = BTreeMap::new();
    for (name, t) in named_tensors(w)? {
        let file = format!("{name}.dqt");
        dqt::write_f64(dir.join(&file), &t)?;
        tensors.insert(name, file);
    }
    let manifest = WeightsManifest {
        config: w.config.clone(),
        tensors,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_weights(dir: impl AsRef<Path>) -> Result<ViTWeights> {
    let dir = dir.as_ref();
    let manifest: WeightsManifest =
        serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let cfg = manifest.config.clone();
    cfg.validate()?;
    let get = |name: String| -> Result<Tensor> {
        let file = manifest
            .tensors
            .get(&name)
            .ok_or_else(|| Error::Format(format!("manifest lacks tensor '{name}'")))?;
        dqt::read_f64(dir.join(file))
    };
    let affine = |p: String| -> Result<LayerNormAffine> {
        Ok(LayerNormAffine {
            gamma: get(format!("{p}.gamma"))?.into_data(),
            beta: get(format!("{p}.beta"))?.into_data(),
        })
    };
    let linear = |p: String, rows: usize, cols: usize| -> Result<LinearLayer> {
        let weight = get(format!("{p}.weight"))?;
        if weight.shape() != [rows, cols] {
            return Err(Error::Format(format!(
                "{p}.weight has shape {:?}, expected [{rows}, {cols}]",
                weight.shape()
            )));
        }
        LinearLayer::new(weight, get(format!("{p}.bias"))?.into_data())
    };
    let (d, hid) = (cfg.dim, cfg.hidden());
    let blocks = (0..cfg.layers)
        .map(|l| {
            let ln1 = affine(format!("blocks.{l}.ln1"))?;
            let ln2 = affine(format!("blocks.{l}.ln2"))?;
            if ln1.dim() != d || ln2.dim() != d {
                return Err(Error::Format(format!("block {l} LayerNorm width mismatch")));
            }
            Ok(BlockWeights {
                ln1,
                qkv: linear(format!("blocks.{l}.qkv"), d, 3 * d)?,
                proj: linear(format!("blocks.{l}.proj"), d, d)?,
                ln2,
                fc1: linear(format!("blocks.{l}.fc1"), d, hid)?,
                fc2: linear(format!("blocks.{l}.fc2"), hid, d)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ViTWeights {
        head: linear("head".into(), d, cfg.classes)?,
        config: cfg,
        blocks,
    })
}
