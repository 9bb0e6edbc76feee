//! End-to-end runs on the toy model: calibrate, plan, quantize, evaluate,
//! and the per-site cluster-count ablation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bits::BitConfig;
use crate::cluster::ReorderPlan;
use crate::error::{Error, Result};
use crate::qlinear::{activation_params, dequantize_with_params, quantize_with_params, GptqConfig};
use crate::qtransformer::{
    build_toy_model, calibrate, plan_model, quantize_model, toy_inputs, ClusterCounts, KVCache, LayerCalibration,
    ModelDims, QuantizeOptions, QuantizedModel, Site, SiteErrors, ToyModel,
};
use crate::strategy::{forward_methods, grouping_strategies, weight_quantizers};
use crate::tensor::{mse, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dims: ModelDims,
    pub model_seed: u64,
    /// Calibration sequences.
    pub calib_samples: usize,
    pub calib_tokens: usize,
    pub eval_samples: usize,
    pub eval_tokens: usize,
    pub mode: String,
    pub clusters: ClusterCounts,
    pub weights: String,
    pub forward: String,
    pub grouping: String,
    pub gptq: GptqConfig,
    pub gptq_rows: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dims: ModelDims::default(),
            model_seed: 0,
            calib_samples: 256,
            calib_tokens: 16,
            eval_samples: 8,
            eval_tokens: 16,
            mode: "W4A4".into(),
            clusters: ClusterCounts::default(),
            weights: "gptq".into(),
            forward: "dequant".into(),
            grouping: "kmeans".into(),
            gptq: GptqConfig::default(),
            gptq_rows: 2048,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn bits(&self) -> Result<BitConfig> {
        self.mode.parse()
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        self.bits()?;
        self.clusters.validate()?;
        if self.calib_samples == 0 || self.calib_tokens == 0 || self.eval_samples == 0 || self.eval_tokens == 0 {
            return Err(Error::InvalidConfig("sample and token counts must be positive".into()));
        }
        grouping_strategies().get(&self.grouping)?;
        weight_quantizers(self.gptq).get(&self.weights)?;
        forward_methods().get(&self.forward)?;
        Ok(())
    }

    pub fn quantize_options(&self) -> Result<QuantizeOptions> {
        let mut o = QuantizeOptions::new(self.bits()?);
        o.weights = self.weights.clone();
        o.forward = self.forward.clone();
        o.gptq = self.gptq;
        o.gptq_rows = self.gptq_rows;
        Ok(o)
    }

    pub fn calibration_inputs(&self) -> Result<Tensor> {
        toy_inputs(&self.dims, self.model_seed, self.calib_samples, self.calib_tokens, self.seed)
    }

    /// Held-out inputs drawn from the same profile as calibration.
    pub fn eval_inputs(&self) -> Result<Tensor> {
        toy_inputs(&self.dims, self.model_seed, self.eval_samples, self.eval_tokens, self.seed ^ 0x6576_616c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: String,
    pub clusters: ClusterCounts,
    pub weights: String,
    pub forward: String,
    /// Hidden-state MSE against the full-precision model after each layer.
    pub layer_output_mse: Vec<f64>,
    pub output_mse: f64,
    /// Activation quantization MSE per site; KV-only modes report K and V only.
    pub site_mse: BTreeMap<String, f64>,
}

/// Runs both models layer by layer on the same input.
pub fn evaluate(fp: &ToyModel, q: &QuantizedModel, x: &Tensor, report_base: RunReportBase) -> Result<RunReport> {
    let b = x.shape()[0];
    let mut fp_cache = KVCache::new(&fp.dims, b);
    let mut q_cache = KVCache::new(&q.dims, b);
    let mut errs = SiteErrors::default();
    let (mut hf, mut hq) = (x.clone(), x.clone());
    let mut layer_output_mse = Vec::with_capacity(fp.layers.len());
    for l in 0..fp.layers.len() {
        hf = fp.layers[l].forward(&hf, &mut fp_cache.layers[l], None)?;
        hq = q.layers[l].forward(&hq, &mut q_cache.layers[l], Some(&mut errs))?;
        layer_output_mse.push(mse(hq.data(), hf.data()));
    }
    Ok(RunReport {
        mode: report_base.mode,
        clusters: report_base.clusters,
        weights: report_base.weights,
        forward: report_base.forward,
        output_mse: *layer_output_mse.last().unwrap(),
        layer_output_mse,
        site_mse: errs
            .sites
            .keys()
            .map(|s| (s.name().to_string(), errs.mse(*s).unwrap()))
            .collect(),
    })
}

#[derive(Debug, Clone)]
pub struct RunReportBase {
    pub mode: String,
    pub clusters: ClusterCounts,
    pub weights: String,
    pub forward: String,
}

impl RunReportBase {
    pub fn of(cfg: &RunConfig) -> Self {
        Self {
            mode: cfg.mode.clone(),
            clusters: cfg.clusters,
            weights: cfg.weights.clone(),
            forward: cfg.forward.clone(),
        }
    }
}

/// Model plus its calibration records, the inputs of every later stage.
pub struct Calibrated {
    pub model: ToyModel,
    pub calib: Vec<LayerCalibration>,
}

pub fn prepare(cfg: &RunConfig) -> Result<Calibrated> {
    cfg.validate()?;
    let model = build_toy_model(cfg.model_seed, cfg.dims)?;
    let calib = calibrate(&model, &cfg.calibration_inputs()?)?;
    Ok(Calibrated { model, calib })
}

pub fn run_with(cfg: &RunConfig, c: &Calibrated) -> Result<RunReport> {
    let grouping = grouping_strategies().get(&cfg.grouping)?;
    let plans = plan_model(&c.calib, &cfg.dims, &cfg.clusters, grouping.as_ref(), cfg.seed)?;
    let q = quantize_model(&c.model, &c.calib, &plans, &cfg.quantize_options()?)?;
    evaluate(&c.model, &q, &cfg.eval_inputs()?, RunReportBase::of(cfg))
}

pub fn run(cfg: &RunConfig) -> Result<RunReport> {
    run_with(cfg, &prepare(cfg)?)
}

/// The five reorder sites as ablation targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ReorderSite {
    R1,
    R2,
    R3,
    R4,
    R5,
}

impl ReorderSite {
    pub const ALL: [ReorderSite; 5] = [ReorderSite::R1, ReorderSite::R2, ReorderSite::R3, ReorderSite::R4, ReorderSite::R5];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        ["R1", "R2", "R3", "R4", "R5"][self.index()]
    }

    /// Activation sites whose quantization the reorder governs.
    pub fn sites(self) -> &'static [Site] {
        match self {
            ReorderSite::R1 => &[Site::Ln1Out],
            ReorderSite::R2 => &[Site::Q, Site::K],
            ReorderSite::R3 => &[Site::V],
            ReorderSite::R4 => &[Site::Ln2Out],
            ReorderSite::R5 => &[Site::Fc1Out],
        }
    }

    pub fn with_count(self, counts: &ClusterCounts, g: usize) -> ClusterCounts {
        let mut a = counts.as_array();
        a[self.index()] = g;
        ClusterCounts::from_array(a)
    }
}

fn site_bits(site: Site, bits: &BitConfig) -> u8 {
    match site {
        Site::Ln1Out | Site::Ln2Out => bits.ln_softmax_bits(),
        Site::K | Site::V => bits.kv_bits,
        _ => bits.activation_bits,
    }
}

fn site_plan(site: Site, p: &crate::qtransformer::DecoderLayerPlan) -> ReorderPlan {
    match site {
        Site::Ln1Out => p.r1.clone(),
        Site::Q | Site::K => p.r2(),
        Site::V | Site::AttnOut => p.r3(),
        Site::Ln2Out => p.r4.clone(),
        Site::Fc1Out => p.r5.clone(),
    }
}

/// In-sample static quantization MSE of the calibration activations at the
/// sites governed by `target`, averaged over layers, when that site uses
/// `g` clusters at `bits_override` (or the mode's bits for the site).
pub fn site_activation_mse(
    c: &Calibrated,
    counts: &ClusterCounts,
    target: ReorderSite,
    g: usize,
    bits: &BitConfig,
    bits_override: Option<u8>,
    grouping: &str,
    seed: u64,
) -> Result<f64> {
    let grouping = grouping_strategies().get(grouping)?;
    let counts = target.with_count(counts, g);
    let plans = plan_model(&c.calib, &c.model.dims, &counts, grouping.as_ref(), seed)?;
    let (mut total, mut n) = (0.0, 0usize);
    for (lc, plan) in c.calib.iter().zip(&plans) {
        for &site in target.sites() {
            let p = site_plan(site, plan);
            let x = lc.inputs.get(site)?.permute_last_axis(&p.perm)?;
            let stats = lc.stats.get(site)?.permuted(&p.perm)?;
            let params = activation_params(&stats, &p, bits_override.unwrap_or_else(|| site_bits(site, bits)))?;
            let hat = dequantize_with_params(&quantize_with_params(&x, &p, &params)?, &p, &params)?;
            total += mse(hat.data(), x.data()) * x.numel() as f64;
            n += x.numel();
        }
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub site: ReorderSite,
    pub g: usize,
    pub activation_mse: f64,
    pub output_mse: f64,
}

/// Varies one reorder site's cluster count at a time, others held at `cfg.clusters`.
pub fn ablate(cfg: &RunConfig, sites: &[ReorderSite], sweep: &[usize]) -> Result<Vec<AblationRow>> {
    let c = prepare(cfg)?;
    ablate_with(cfg, &c, sites, sweep)
}

pub fn ablate_with(cfg: &RunConfig, c: &Calibrated, sites: &[ReorderSite], sweep: &[usize]) -> Result<Vec<AblationRow>> {
    if sites.is_empty() || sweep.is_empty() {
        return Err(Error::InvalidConfig("ablation needs at least one site and one cluster count".into()));
    }
    let bits = cfg.bits()?;
    let mut rows = Vec::with_capacity(sites.len() * sweep.len());
    for &site in sites {
        for &g in sweep {
            let mut run_cfg = cfg.clone();
            run_cfg.clusters = site.with_count(&cfg.clusters, g);
            let report = run_with(&run_cfg, c)?;
            rows.push(AblationRow {
                site,
                g,
                activation_mse: site_activation_mse(c, &cfg.clusters, site, g, &bits, None, &cfg.grouping, cfg.seed)?,
                output_mse: report.output_mse,
            });
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("site,g,activation_mse,output_mse\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.6e},{:.6e}", r.site.name(), r.g, r.activation_mse, r.output_mse);
    }
    out
}
