//! On-disk stage artifacts. Every stage reads only files written by earlier
//! stages, so any stage can be rerun in isolation.
//!
//! ```text
//! <root>/model/config.json            dims + model seed
//! <root>/model/layer{l}/ln{1,2}.json  layer norms
//! <root>/model/layer{l}/{proj}.w.bin  weights, {proj}.b.bin bias
//! <root>/calib/meta.json
//! <root>/calib/layer{l}/{site}.stats.json, qk_joint.json, {site}.acts.bin
//! <root>/plan/meta.json, plan/layer{l}.json
//! <root>/quant/options.json
//! <root>/quant/layer{l}/layer.json, {proj}.codes.bin, {proj}.json
//! ```
//!
//! JSON is written with sorted map keys and a trailing newline so reruns are
//! byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bits::BitConfig;
use crate::cluster::ReorderPlan;
use crate::error::{Error, Result};
use crate::fusion::{LayerNormOp, LinearWeights};
use crate::qlinear::{ClusteredQuantLinear, QuantizedWeights};
use crate::qtransformer::{
    DecoderLayerPlan, DecoderLayerWeights, LayerCalibration, LayerStats, ModelDims, QuantizeOptions,
    QuantizedDecoderLayer, QuantizedModel, SiteActivations, SiteParams, ToyModel, ClusterCounts, Site,
};
use crate::quant::QuantParams;
use crate::strategy::forward_methods;
use crate::tensor::{IntTensor, Tensor};

pub const MODEL_DIR: &str = "model";
pub const CALIB_DIR: &str = "calib";
pub const PLAN_DIR: &str = "plan";
pub const QUANT_DIR: &str = "quant";

const PROJECTIONS: [&str; 6] = ["q_proj", "k_proj", "v_proj", "out_proj", "fc1", "fc2"];

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| missing(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn missing(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::MissingArtifact(path.display().to_string())
    } else {
        Error::Io(e)
    }
}

fn load_tensor(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    Tensor::load(path)
}

/// Replaces `dir` with a fresh empty directory.
fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn layer_dir(root: &Path, stage: &str, l: usize) -> PathBuf {
    root.join(stage).join(format!("layer{l}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dims: ModelDims,
    pub model_seed: u64,
}

fn projections(w: &DecoderLayerWeights) -> [&LinearWeights; 6] {
    [&w.q_proj, &w.k_proj, &w.v_proj, &w.out_proj, &w.fc1, &w.fc2]
}

pub fn save_model(root: &Path, model: &ToyModel, model_seed: u64) -> Result<()> {
    let dir = root.join(MODEL_DIR);
    fresh_dir(&dir)?;
    write_json(dir.join("config.json"), &ModelConfig { dims: model.dims, model_seed })?;
    for (l, w) in model.layers.iter().enumerate() {
        let ld = layer_dir(root, MODEL_DIR, l);
        fs::create_dir_all(&ld)?;
        write_json(ld.join("ln1.json"), &w.ln1)?;
        write_json(ld.join("ln2.json"), &w.ln2)?;
        for (name, lin) in PROJECTIONS.iter().zip(projections(w)) {
            lin.w.save(ld.join(format!("{name}.w.bin")))?;
            Tensor::new(vec![lin.bias.len()], lin.bias.clone())?.save(ld.join(format!("{name}.b.bin")))?;
        }
    }
    Ok(())
}

pub fn load_model(root: &Path) -> Result<(ToyModel, ModelConfig)> {
    let cfg: ModelConfig = read_json(root.join(MODEL_DIR).join("config.json"))?;
    cfg.dims.validate()?;
    let mut layers = Vec::with_capacity(cfg.dims.layers);
    for l in 0..cfg.dims.layers {
        let ld = layer_dir(root, MODEL_DIR, l);
        let lin = |name: &str| -> Result<LinearWeights> {
            let w = load_tensor(&ld.join(format!("{name}.w.bin")))?;
            let b = load_tensor(&ld.join(format!("{name}.b.bin")))?;
            LinearWeights::new(w, b.into_data())
        };
        let ln1: LayerNormOp = read_json(ld.join("ln1.json"))?;
        let ln2: LayerNormOp = read_json(ld.join("ln2.json"))?;
        layers.push(DecoderLayerWeights {
            ln1,
            q_proj: lin("q_proj")?,
            k_proj: lin("k_proj")?,
            v_proj: lin("v_proj")?,
            out_proj: lin("out_proj")?,
            ln2,
            fc1: lin("fc1")?,
            fc2: lin("fc2")?,
        });
    }
    Ok((ToyModel { dims: cfg.dims, layers }, cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMeta {
    pub samples: usize,
    pub tokens: usize,
    pub seed: u64,
    pub layers: usize,
}

pub fn save_calibration(root: &Path, dims: &ModelDims, calib: &[LayerCalibration], meta: &CalibrationMeta) -> Result<()> {
    fresh_dir(&root.join(CALIB_DIR))?;
    write_json(root.join(CALIB_DIR).join("meta.json"), meta)?;
    for (l, c) in calib.iter().enumerate() {
        let ld = layer_dir(root, CALIB_DIR, l);
        fs::create_dir_all(&ld)?;
        for (site, stats) in &c.stats.sites {
            write_json(ld.join(format!("{site}.stats.json")), stats)?;
        }
        write_json(ld.join("qk_joint.json"), &c.stats.qk_joint(dims.heads)?)?;
        for (site, t) in &c.inputs.sites {
            t.save(ld.join(format!("{site}.acts.bin")))?;
        }
    }
    Ok(())
}

pub fn load_calibration(root: &Path) -> Result<(Vec<LayerCalibration>, CalibrationMeta)> {
    let meta: CalibrationMeta = read_json(root.join(CALIB_DIR).join("meta.json"))?;
    let mut out = Vec::with_capacity(meta.layers);
    for l in 0..meta.layers {
        let ld = layer_dir(root, CALIB_DIR, l);
        let mut stats = BTreeMap::new();
        let mut inputs = BTreeMap::new();
        for site in Site::ALL {
            stats.insert(site, read_json(ld.join(format!("{site}.stats.json")))?);
            inputs.insert(site, load_tensor(&ld.join(format!("{site}.acts.bin")))?);
        }
        out.push(LayerCalibration {
            stats: LayerStats { sites: stats },
            inputs: SiteActivations { sites: inputs },
        });
    }
    Ok((out, meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanMeta {
    pub clusters: ClusterCounts,
    pub grouping: String,
    pub seed: u64,
    pub layers: usize,
}

pub fn save_plans(root: &Path, plans: &[DecoderLayerPlan], meta: &PlanMeta) -> Result<()> {
    let dir = root.join(PLAN_DIR);
    fresh_dir(&dir)?;
    write_json(dir.join("meta.json"), meta)?;
    for (l, p) in plans.iter().enumerate() {
        write_json(dir.join(format!("layer{l}.json")), p)?;
    }
    Ok(())
}

pub fn load_plans(root: &Path) -> Result<(Vec<DecoderLayerPlan>, PlanMeta)> {
    let dir = root.join(PLAN_DIR);
    let meta: PlanMeta = read_json(dir.join("meta.json"))?;
    let plans = (0..meta.layers)
        .map(|l| {
            let p: DecoderLayerPlan = read_json(dir.join(format!("layer{l}.json")))?;
            p.check()?;
            Ok(p)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((plans, meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LinearRecord {
    bits: u8,
    params: Vec<QuantParams>,
    in_plan: ReorderPlan,
    out_plan: ReorderPlan,
    bias: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerRecord {
    bits: BitConfig,
    plan: DecoderLayerPlan,
    ln1: LayerNormOp,
    ln2: LayerNormOp,
    params: SiteParams,
    forward: String,
}

fn quantized_projections(q: &QuantizedDecoderLayer) -> [&ClusteredQuantLinear; 6] {
    [&q.q_proj, &q.k_proj, &q.v_proj, &q.out_proj, &q.fc1, &q.fc2]
}

pub fn save_quantized(root: &Path, q: &QuantizedModel, opts: &QuantizeOptions) -> Result<()> {
    let dir = root.join(QUANT_DIR);
    fresh_dir(&dir)?;
    write_json(dir.join("options.json"), opts)?;
    write_json(dir.join("dims.json"), &q.dims)?;
    for (l, layer) in q.layers.iter().enumerate() {
        let ld = layer_dir(root, QUANT_DIR, l);
        fs::create_dir_all(&ld)?;
        write_json(
            ld.join("layer.json"),
            &LayerRecord {
                bits: layer.bits,
                plan: layer.plan.clone(),
                ln1: layer.ln1.clone(),
                ln2: layer.ln2.clone(),
                params: layer.params.clone(),
                forward: layer.forward_method.name().to_string(),
            },
        )?;
        for (name, lin) in PROJECTIONS.iter().zip(quantized_projections(layer)) {
            lin.weights.wq.save(ld.join(format!("{name}.codes.bin")))?;
            write_json(
                ld.join(format!("{name}.json")),
                &LinearRecord {
                    bits: lin.weights.wq.bits(),
                    params: lin.weights.params.clone(),
                    in_plan: lin.in_plan.clone(),
                    out_plan: lin.out_plan.clone(),
                    bias: lin.bias.clone(),
                },
            )?;
        }
    }
    Ok(())
}

pub fn load_quantized(root: &Path) -> Result<(QuantizedModel, QuantizeOptions)> {
    let dir = root.join(QUANT_DIR);
    let opts: QuantizeOptions = read_json(dir.join("options.json"))?;
    let dims: ModelDims = read_json(dir.join("dims.json"))?;
    let mut layers = Vec::with_capacity(dims.layers);
    for l in 0..dims.layers {
        let ld = layer_dir(root, QUANT_DIR, l);
        let rec: LayerRecord = read_json(ld.join("layer.json"))?;
        rec.plan.check()?;
        let lin = |name: &str| -> Result<ClusteredQuantLinear> {
            let r: LinearRecord = read_json(ld.join(format!("{name}.json")))?;
            let path = ld.join(format!("{name}.codes.bin"));
            if !path.exists() {
                return Err(Error::MissingArtifact(path.display().to_string()));
            }
            let wq = IntTensor::load(&path, r.bits)?;
            ClusteredQuantLinear::new(QuantizedWeights { wq, params: r.params }, r.in_plan, r.out_plan, r.bias)
        };
        layers.push(QuantizedDecoderLayer {
            bits: rec.bits,
            q_proj: lin("q_proj")?,
            k_proj: lin("k_proj")?,
            v_proj: lin("v_proj")?,
            out_proj: lin("out_proj")?,
            fc1: lin("fc1")?,
            fc2: lin("fc2")?,
            plan: rec.plan,
            ln1: rec.ln1,
            ln2: rec.ln2,
            params: rec.params,
            forward_method: forward_methods().get(&rec.forward)?,
        });
    }
    Ok((QuantizedModel { dims, layers }, opts))
}
