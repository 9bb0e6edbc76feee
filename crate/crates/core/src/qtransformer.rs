//! A pre-norm decoder layer with the five reorder sites, its quantized
//! counterpart, and a key/value cache for incremental decoding.
//!
//! Reorder sites:
//!
//! | site | tensor | planned from |
//! |------|--------|--------------|
//! | R1 | LN1 output, input of q/k/v | LN1 output ranges |
//! | R2 | Q and K outputs, per head, one plan shared by both | `(q_max, q_min, k_max, k_min)` |
//! | R3 | V output per head; also the attention output and out_proj input | V ranges |
//! | R4 | LN2 output, input of fc1 | LN2 output ranges |
//! | R5 | fc1 output after ReLU, input of fc2 | fc1 output ranges |
//!
//! out_proj and fc2 write the residual stream and stay in model order.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bits::BitConfig;
use crate::calib::{ChannelStats, QKJointStats};
use crate::cluster::ReorderPlan;
use crate::error::{Error, Result};
use crate::fusion::{check_alignment, fuse_linear, LayerNormOp, LayerWiring, LinearOrders, LinearWeights};
use crate::qlinear::{activation_params, dequantize_with_params, quantize_with_params, ClusteredQuantLinear, GptqConfig};
use crate::quant::{minmax_params, QuantParams};
use crate::strategy::{forward_methods, weight_quantizers, ForwardMethod, GroupingStrategy};
use crate::tensor::{invert_permutation, mse, IntTensor, Tensor};
use crate::testkit::{gen_activations, ChannelProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self::new(2, 128, 4)
    }
}

impl ModelDims {
    /// FFN width is four times the hidden size.
    pub fn new(layers: usize, hidden: usize, heads: usize) -> Self {
        Self {
            layers,
            hidden,
            heads,
            ffn: 4 * hidden,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.ffn == 0 {
            return Err(Error::InvalidConfig(format!("model dims must be positive: {self:?}")));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

/// Activation sites observed during calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Site {
    Ln1Out,
    Q,
    K,
    V,
    AttnOut,
    Ln2Out,
    Fc1Out,
}

impl Site {
    pub const ALL: [Site; 7] = [Site::Ln1Out, Site::Q, Site::K, Site::V, Site::AttnOut, Site::Ln2Out, Site::Fc1Out];

    pub fn name(self) -> &'static str {
        match self {
            Site::Ln1Out => "ln1_out",
            Site::Q => "q",
            Site::K => "k",
            Site::V => "v",
            Site::AttnOut => "attn_out",
            Site::Ln2Out => "ln2_out",
            Site::Fc1Out => "fc1_out",
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Full-precision weights of one decoder layer, possibly with reorders fused in.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerWeights {
    pub ln1: LayerNormOp,
    pub q_proj: LinearWeights,
    pub k_proj: LinearWeights,
    pub v_proj: LinearWeights,
    pub out_proj: LinearWeights,
    pub ln2: LayerNormOp,
    pub fc1: LinearWeights,
    pub fc2: LinearWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub dims: ModelDims,
    pub layers: Vec<DecoderLayerWeights>,
}

fn gaussian_linear(rng: &mut ChaCha8Rng, out: usize, inp: usize, gain: f64, bias_std: f64) -> Result<LinearWeights> {
    let w = Normal::new(0.0, gain / (inp as f64).sqrt()).unwrap();
    let data = (0..out * inp).map(|_| w.sample(rng) as f32).collect();
    let bias = (0..out)
        .map(|_| if bias_std > 0.0 { Normal::new(0.0, bias_std).unwrap().sample(rng) as f32 } else { 0.0 })
        .collect();
    LinearWeights::new(Tensor::new(vec![out, inp], data)?, bias)
}

/// Gamma near 1 with a few amplified channels and spread-out betas, so layer
/// norm outputs carry the channel-wise range differences reordering targets.
fn outlier_layernorm(rng: &mut ChaCha8Rng, c: usize) -> Result<LayerNormOp> {
    let n_out = ((c as f64) * 0.04).round().max(1.0) as usize;
    let outliers = rand::seq::index::sample(rng, c, n_out.min(c)).into_vec();
    let mut gamma: Vec<f32> = (0..c).map(|_| rng.random_range(0.5..1.5)).collect();
    for i in outliers {
        gamma[i] *= rng.random_range(8.0..20.0);
    }
    let beta_dist = Normal::new(0.0, 0.5).unwrap();
    let beta = (0..c).map(|_| beta_dist.sample(rng) as f32).collect();
    LayerNormOp::new(gamma, beta, 1e-5)
}

/// Deterministic random decoder stack; no embeddings or output head.
pub fn build_toy_model(seed: u64, dims: ModelDims) -> Result<ToyModel> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, f) = (dims.hidden, dims.ffn);
    let layers = (0..dims.layers)
        .map(|_| {
            Ok(DecoderLayerWeights {
                ln1: outlier_layernorm(&mut rng, d)?,
                q_proj: gaussian_linear(&mut rng, d, d, 0.5, 1.0)?,
                k_proj: gaussian_linear(&mut rng, d, d, 0.5, 1.0)?,
                v_proj: gaussian_linear(&mut rng, d, d, 1.0, 1.0)?,
                out_proj: gaussian_linear(&mut rng, d, d, 0.5, 0.1)?,
                ln2: outlier_layernorm(&mut rng, d)?,
                fc1: gaussian_linear(&mut rng, f, d, 1.0, 1.0)?,
                fc2: gaussian_linear(&mut rng, d, f, 0.5, 0.1)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ToyModel { dims, layers })
}

/// Profile of the residual-stream inputs fed to the toy model.
pub fn toy_input_profile(hidden: usize, seed: u64) -> ChannelProfile {
    ChannelProfile {
        channels: hidden,
        outlier_fraction: 0.03,
        outlier_multiplier: 20.0,
        offsets: Vec::new(),
        offset_spread: 1.0,
        sigma: 1.0,
        sigma_jitter: 0.5,
        outlier_one_sided: false,
        seed,
    }
}

/// `[b, n, hidden]` inputs; the channel profile is fixed by `model_seed`, samples by `seed`.
pub fn toy_inputs(dims: &ModelDims, model_seed: u64, b: usize, n: usize, seed: u64) -> Result<Tensor> {
    gen_activations(&toy_input_profile(dims.hidden, model_seed), b, n, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterCounts {
    pub r1: usize,
    pub r2: usize,
    pub r3: usize,
    pub r4: usize,
    pub r5: usize,
}

impl Default for ClusterCounts {
    fn default() -> Self {
        Self {
            r1: 32,
            r2: 4,
            r3: 4,
            r4: 32,
            r5: 32,
        }
    }
}

impl ClusterCounts {
    pub fn uniform(g: usize) -> Self {
        Self {
            r1: g,
            r2: g,
            r3: g,
            r4: g,
            r5: g,
        }
    }

    pub fn as_array(&self) -> [usize; 5] {
        [self.r1, self.r2, self.r3, self.r4, self.r5]
    }

    pub fn from_array(a: [usize; 5]) -> Self {
        Self {
            r1: a[0],
            r2: a[1],
            r3: a[2],
            r4: a[3],
            r5: a[4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().contains(&0) {
            return Err(Error::InvalidConfig(format!("cluster counts must be positive: {self}")));
        }
        Ok(())
    }
}

impl fmt::Display for ClusterCounts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{},{}", self.r1, self.r2, self.r3, self.r4, self.r5)
    }
}

impl FromStr for ClusterCounts {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 5 {
            return Err(Error::InvalidConfig(format!("expected five cluster counts r1..r5, got {s:?}")));
        }
        let mut a = [0usize; 5];
        for (slot, p) in a.iter_mut().zip(&parts) {
            *slot = p
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("bad cluster count {p:?}")))?;
        }
        let c = Self::from_array(a);
        c.validate()?;
        Ok(c)
    }
}

/// Tensors at every calibration site, in model channel order, flattened to `[rows, channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteActivations {
    pub sites: BTreeMap<Site, Tensor>,
}

impl SiteActivations {
    pub fn get(&self, site: Site) -> Result<&Tensor> {
        self.sites
            .get(&site)
            .ok_or_else(|| Error::MissingStats(format!("no captured activations for {site}")))
    }
}

/// Per-site channel statistics of one layer, in model channel order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub sites: BTreeMap<Site, ChannelStats>,
}

impl LayerStats {
    pub fn new(dims: &ModelDims) -> Self {
        let sites = Site::ALL
            .iter()
            .map(|&s| {
                let c = if s == Site::Fc1Out { dims.ffn } else { dims.hidden };
                (s, ChannelStats::new(c))
            })
            .collect();
        Self { sites }
    }

    /// Folds flattened activations of `samples` sequences; `samples_seen`
    /// counts sequences, not token rows.
    pub fn collect(&mut self, acts: &SiteActivations, samples: usize) -> Result<()> {
        for (site, stats) in self.sites.iter_mut() {
            let t = acts.get(*site)?;
            if samples == 0 || t.rows() % samples != 0 {
                return Err(Error::ShapeMismatch(format!("{} rows do not split into {samples} samples", t.rows())));
            }
            stats.collect(&t.clone().reshape(vec![samples, t.rows() / samples, t.last_dim()])?)?;
        }
        Ok(())
    }

    pub fn get(&self, site: Site) -> Result<&ChannelStats> {
        match self.sites.get(&site) {
            Some(s) if !s.is_empty() => Ok(s),
            _ => Err(Error::MissingStats(format!("no statistics for site {site}"))),
        }
    }

    pub fn qk_joint(&self, heads: usize) -> Result<QKJointStats> {
        QKJointStats::from_channel_stats(self.get(Site::Q)?, self.get(Site::K)?, heads)
    }
}

/// Reorder plans for one layer. Per-head plans index within their head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderLayerPlan {
    pub counts: ClusterCounts,
    pub r1: ReorderPlan,
    pub r2_heads: Vec<ReorderPlan>,
    pub r3_heads: Vec<ReorderPlan>,
    pub r4: ReorderPlan,
    pub r5: ReorderPlan,
}

impl DecoderLayerPlan {
    pub fn identity(dims: &ModelDims) -> Self {
        let hd = dims.head_dim();
        Self {
            counts: ClusterCounts::uniform(1),
            r1: ReorderPlan::identity(dims.hidden),
            r2_heads: vec![ReorderPlan::identity(hd); dims.heads],
            r3_heads: vec![ReorderPlan::identity(hd); dims.heads],
            r4: ReorderPlan::identity(dims.hidden),
            r5: ReorderPlan::identity(dims.ffn),
        }
    }

    pub fn heads(&self) -> usize {
        self.r2_heads.len()
    }

    /// Full-width Q/K plan.
    pub fn r2(&self) -> ReorderPlan {
        ReorderPlan::concat(&self.r2_heads)
    }

    /// Full-width V / attention-output plan.
    pub fn r3(&self) -> ReorderPlan {
        ReorderPlan::concat(&self.r3_heads)
    }

    pub fn wiring(&self) -> LayerWiring {
        let (r1, r2, r3) = (self.r1.perm.clone(), self.r2().perm, self.r3().perm);
        let ident = |n: usize| (0..n).collect::<Vec<_>>();
        let d = r1.len();
        LayerWiring {
            heads: self.heads(),
            ln1_out: r1.clone(),
            q_proj: LinearOrders { input: r1.clone(), output: r2.clone() },
            k_proj: LinearOrders { input: r1.clone(), output: r2 },
            v_proj: LinearOrders { input: r1, output: r3.clone() },
            out_proj: LinearOrders { input: r3, output: ident(d) },
            ln2_out: self.r4.perm.clone(),
            fc1: LinearOrders { input: self.r4.perm.clone(), output: self.r5.perm.clone() },
            fc2: LinearOrders { input: self.r5.perm.clone(), output: ident(d) },
        }
    }

    pub fn check(&self) -> Result<()> {
        for p in [&self.r1, &self.r4, &self.r5].into_iter().chain(&self.r2_heads).chain(&self.r3_heads) {
            p.validate()?;
        }
        check_alignment(&self.wiring()).map_err(Error::Alignment)
    }
}

/// Plans every reorder site of a layer from its calibration statistics.
pub fn plan_layer(
    stats: &LayerStats,
    dims: &ModelDims,
    counts: &ClusterCounts,
    grouping: &dyn GroupingStrategy,
    seed: u64,
) -> Result<DecoderLayerPlan> {
    counts.validate()?;
    let hd = dims.head_dim();
    let qk = stats.qk_joint(dims.heads)?;
    let v = stats.get(Site::V)?;
    let r1 = grouping.plan(&stats.get(Site::Ln1Out)?.range_signatures(), counts.r1, seed)?;
    let mut r2_heads = Vec::with_capacity(dims.heads);
    let mut r3_heads = Vec::with_capacity(dims.heads);
    for (h, head) in qk.heads.iter().enumerate() {
        let s = seed.wrapping_add(1 + h as u64);
        r2_heads.push(grouping.plan(&head.quaternion_points(), counts.r2, s)?);
        r3_heads.push(grouping.plan(&v.slice(h * hd, hd).range_signatures(), counts.r3, s)?);
    }
    let r4 = grouping.plan(&stats.get(Site::Ln2Out)?.range_signatures(), counts.r4, seed)?;
    let r5 = grouping.plan(&stats.get(Site::Fc1Out)?.range_signatures(), counts.r5, seed)?;
    let plan = DecoderLayerPlan {
        counts: *counts,
        r1,
        r2_heads,
        r3_heads,
        r4,
        r5,
    };
    plan.check()?;
    Ok(plan)
}

/// Folds a layer plan into model-order weights.
pub fn fuse_layer(w: &DecoderLayerWeights, plan: &DecoderLayerPlan) -> Result<DecoderLayerWeights> {
    let (r2, r3) = (plan.r2(), plan.r3());
    let fused = DecoderLayerWeights {
        ln1: w.ln1.clone().with_plan(Some(plan.r1.clone()))?,
        q_proj: fuse_linear(&w.q_proj, Some(&plan.r1), Some(&r2))?,
        k_proj: fuse_linear(&w.k_proj, Some(&plan.r1), Some(&r2))?,
        v_proj: fuse_linear(&w.v_proj, Some(&plan.r1), Some(&r3))?,
        out_proj: fuse_linear(&w.out_proj, Some(&r3), None)?,
        ln2: w.ln2.clone().with_plan(Some(plan.r4.clone()))?,
        fc1: fuse_linear(&w.fc1, Some(&plan.r4), Some(&plan.r5))?,
        fc2: fuse_linear(&w.fc2, Some(&plan.r5), None)?,
    };
    check_alignment(&layer_wiring(&fused, plan.heads())).map_err(Error::Alignment)?;
    Ok(fused)
}

/// Channel orders actually carried by a (possibly fused) layer.
pub fn layer_wiring(w: &DecoderLayerWeights, heads: usize) -> LayerWiring {
    let ln_order = |ln: &LayerNormOp| {
        ln.out_plan
            .as_ref()
            .map_or_else(|| (0..ln.channels()).collect(), |p| p.perm.clone())
    };
    LayerWiring {
        heads,
        ln1_out: ln_order(&w.ln1),
        q_proj: LinearOrders::of(&w.q_proj),
        k_proj: LinearOrders::of(&w.k_proj),
        v_proj: LinearOrders::of(&w.v_proj),
        out_proj: LinearOrders::of(&w.out_proj),
        ln2_out: ln_order(&w.ln2),
        fc1: LinearOrders::of(&w.fc1),
        fc2: LinearOrders::of(&w.fc2),
    }
}

/// Cached rows of one sequence, `width` values per token.
#[derive(Debug, Clone, PartialEq)]
pub enum CacheStore {
    Empty,
    Float(Vec<f32>),
    /// Codes in reordered channel order with one parameter set per cluster.
    Quantized {
        codes: Vec<i32>,
        bits: u8,
        params: Vec<QuantParams>,
        plan: ReorderPlan,
    },
}

impl CacheStore {
    fn append_float(&mut self, rows: &[f32]) -> Result<()> {
        match self {
            CacheStore::Empty => *self = CacheStore::Float(rows.to_vec()),
            CacheStore::Float(v) => v.extend_from_slice(rows),
            CacheStore::Quantized { .. } => {
                return Err(Error::CacheMismatch("float rows appended to a quantized cache".into()))
            }
        }
        Ok(())
    }

    fn append_quantized(&mut self, rows: &[i32], bits: u8, params: &[QuantParams], plan: &ReorderPlan) -> Result<()> {
        match self {
            CacheStore::Empty => {
                *self = CacheStore::Quantized {
                    codes: rows.to_vec(),
                    bits,
                    params: params.to_vec(),
                    plan: plan.clone(),
                }
            }
            CacheStore::Quantized {
                codes,
                bits: b,
                params: p,
                plan: pl,
            } if *b == bits && p == params && pl == plan => codes.extend_from_slice(rows),
            _ => {
                return Err(Error::CacheMismatch(
                    "quantized rows appended with different parameters or to a float cache".into(),
                ))
            }
        }
        Ok(())
    }

    fn len_values(&self) -> usize {
        match self {
            CacheStore::Empty => 0,
            CacheStore::Float(v) => v.len(),
            CacheStore::Quantized { codes, .. } => codes.len(),
        }
    }

    /// Values as used by attention.
    pub fn values(&self) -> Vec<f32> {
        match self {
            CacheStore::Empty => Vec::new(),
            CacheStore::Float(v) => v.clone(),
            CacheStore::Quantized { codes, params, plan, .. } => {
                let cl = plan.cluster_of_position();
                let w = cl.len();
                codes
                    .iter()
                    .enumerate()
                    .map(|(i, &q)| params[cl[i % w]].dequantize(q))
                    .collect()
            }
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, CacheStore::Quantized { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceCache {
    pub keys: CacheStore,
    pub values: CacheStore,
}

/// Key/value cache of one layer: one independent cache per sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKV {
    pub width: usize,
    pub heads: usize,
    pub sequences: Vec<SequenceCache>,
    tokens: usize,
}

impl LayerKV {
    pub fn new(batch: usize, width: usize, heads: usize) -> Self {
        Self {
            width,
            heads,
            sequences: vec![
                SequenceCache {
                    keys: CacheStore::Empty,
                    values: CacheStore::Empty,
                };
                batch
            ],
            tokens: 0,
        }
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// Codes of sequence `b` as `[tokens, width]`, when the cache is quantized.
    pub fn key_codes(&self, b: usize) -> Option<IntTensor> {
        Self::codes(&self.sequences[b].keys, self.tokens, self.width)
    }

    pub fn value_codes(&self, b: usize) -> Option<IntTensor> {
        Self::codes(&self.sequences[b].values, self.tokens, self.width)
    }

    fn codes(store: &CacheStore, tokens: usize, width: usize) -> Option<IntTensor> {
        match store {
            CacheStore::Quantized { codes, bits, .. } => IntTensor::new(vec![tokens, width], codes.clone(), *bits).ok(),
            _ => None,
        }
    }

    /// Dequantized keys of one head of sequence `b`, `[tokens, head_dim]`.
    pub fn head_keys(&self, b: usize, head: usize) -> Result<Tensor> {
        self.head_slice(&self.sequences[b].keys, head)
    }

    pub fn head_values(&self, b: usize, head: usize) -> Result<Tensor> {
        self.head_slice(&self.sequences[b].values, head)
    }

    fn head_slice(&self, store: &CacheStore, head: usize) -> Result<Tensor> {
        let hd = self.width / self.heads;
        let all = store.values();
        let data = all
            .chunks_exact(self.width)
            .flat_map(|r| r[head * hd..(head + 1) * hd].iter().copied())
            .collect();
        Tensor::new(vec![self.tokens, hd], data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KVCache {
    pub layers: Vec<LayerKV>,
}

impl KVCache {
    pub fn new(dims: &ModelDims, batch: usize) -> Self {
        Self {
            layers: (0..dims.layers).map(|_| LayerKV::new(batch, dims.hidden, dims.heads)).collect(),
        }
    }

    pub fn tokens(&self) -> usize {
        self.layers.first().map_or(0, LayerKV::tokens)
    }
}

/// How the attention block stores K/V and treats probabilities.
struct AttentionQuant<'a> {
    k: (&'a ReorderPlan, &'a [QuantParams]),
    v: (&'a ReorderPlan, &'a [QuantParams]),
    probs: Option<QuantParams>,
}

fn dims3(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [b, n, c] => Ok((*b, *n, *c)),
        s => Err(Error::ShapeMismatch(format!("expected [B, N, C], got {s:?}"))),
    }
}

/// Appends the new keys/values to the cache, then runs causal attention of
/// the new queries over every cached position. Head `h` owns channels
/// `h * hd .. (h + 1) * hd` of q, k and v.
fn attention(q: &Tensor, k: &Tensor, v: &Tensor, cache: &mut LayerKV, quant: Option<&AttentionQuant>) -> Result<Tensor> {
    let (b, n, d) = dims3(q)?;
    if cache.sequences.len() != b || cache.width != d || k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(Error::CacheMismatch(format!(
            "cache holds {} sequences of width {}, input is {:?}",
            cache.sequences.len(),
            cache.width,
            q.shape()
        )));
    }
    let heads = cache.heads;
    let hd = d / heads;
    let past = cache.tokens;
    for s in &cache.sequences {
        if s.keys.len_values() != past * d || s.values.len_values() != past * d {
            return Err(Error::CacheMismatch("sequence caches disagree on length".into()));
        }
    }
    let k_codes = quant.map(|a| quantize_with_params(k, a.k.0, a.k.1)).transpose()?;
    let v_codes = quant.map(|a| quantize_with_params(v, a.v.0, a.v.1)).transpose()?;
    let rows = n * d;
    for (bi, seq) in cache.sequences.iter_mut().enumerate() {
        let r = bi * rows..(bi + 1) * rows;
        match (&k_codes, &v_codes, quant) {
            (Some(kc), Some(vc), Some(a)) => {
                seq.keys.append_quantized(&kc.data()[r.clone()], kc.bits(), a.k.1, a.k.0)?;
                seq.values.append_quantized(&vc.data()[r], vc.bits(), a.v.1, a.v.0)?;
            }
            _ => {
                seq.keys.append_float(&k.data()[r.clone()])?;
                seq.values.append_float(&v.data()[r])?;
            }
        }
    }
    cache.tokens += n;
    let total = cache.tokens;
    let scale = 1.0 / (hd as f64).sqrt();
    let probs_q = quant.and_then(|a| a.probs);

    let mut out = vec![0.0f32; b * n * d];
    let mut scores = vec![0.0f64; total];
    for (bi, seq) in cache.sequences.iter().enumerate() {
        let keys = seq.keys.values();
        let vals = seq.values.values();
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            for i in 0..n {
                let qrow = &q.data()[(bi * n + i) * d..][cols.clone()];
                let visible = past + i + 1;
                let mut m = f64::NEG_INFINITY;
                for (t, s) in scores[..visible].iter_mut().enumerate() {
                    let krow = &keys[t * d..][cols.clone()];
                    *s = qrow.iter().zip(krow).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>() * scale;
                    m = m.max(*s);
                }
                let mut z = 0.0;
                for s in &mut scores[..visible] {
                    *s = (*s - m).exp();
                    z += *s;
                }
                let dst = &mut out[(bi * n + i) * d..][cols.clone()];
                let mut acc = vec![0.0f64; hd];
                for (t, s) in scores[..visible].iter().enumerate() {
                    let mut p = *s / z;
                    if let Some(pq) = &probs_q {
                        p = pq.fake_quant(p as f32) as f64;
                    }
                    let vrow = &vals[t * d..][cols.clone()];
                    for (a, vv) in acc.iter_mut().zip(vrow) {
                        *a += p * *vv as f64;
                    }
                }
                for (o, a) in dst.iter_mut().zip(acc) {
                    *o = a as f32;
                }
            }
        }
    }
    Tensor::new(vec![b, n, d], out)
}

fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} + {:?}", a.shape(), b.shape())));
    }
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect())
}

fn relu(x: Tensor) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    Tensor::new(shape, x.into_data().into_iter().map(|v| v.max(0.0)).collect())
}

fn flat(x: &Tensor) -> Result<Tensor> {
    x.clone().reshape(vec![x.rows(), x.last_dim()])
}

impl DecoderLayerWeights {
    /// Full-precision forward. Works for both model-order and fused weights;
    /// with `capture`, site tensors are recorded in the layer's own channel order.
    pub fn forward(&self, x: &Tensor, cache: &mut LayerKV, mut capture: Option<&mut SiteActivations>) -> Result<Tensor> {
        let mut rec = |site: Site, t: &Tensor| -> Result<()> {
            if let Some(c) = capture.as_deref_mut() {
                c.sites.insert(site, flat(t)?);
            }
            Ok(())
        };
        let a = self.ln1.forward(x)?;
        rec(Site::Ln1Out, &a)?;
        let q = self.q_proj.forward(&a)?;
        let k = self.k_proj.forward(&a)?;
        let v = self.v_proj.forward(&a)?;
        rec(Site::Q, &q)?;
        rec(Site::K, &k)?;
        rec(Site::V, &v)?;
        let o = attention(&q, &k, &v, cache, None)?;
        rec(Site::AttnOut, &o)?;
        let h = add(x, &self.out_proj.forward(&o)?)?;
        let b = self.ln2.forward(&h)?;
        rec(Site::Ln2Out, &b)?;
        let f = relu(self.fc1.forward(&b)?)?;
        rec(Site::Fc1Out, &f)?;
        add(&h, &self.fc2.forward(&f)?)
    }
}

impl ToyModel {
    pub fn forward(&self, x: &Tensor, cache: &mut KVCache) -> Result<Tensor> {
        if cache.layers.len() != self.layers.len() {
            return Err(Error::CacheMismatch(format!(
                "cache has {} layers, model {}",
                cache.layers.len(),
                self.layers.len()
            )));
        }
        let mut h = x.clone();
        for (l, kv) in self.layers.iter().zip(cache.layers.iter_mut()) {
            h = l.forward(&h, kv, None)?;
        }
        Ok(h)
    }

    pub fn forward_fresh(&self, x: &Tensor) -> Result<Tensor> {
        let (b, _, _) = dims3(x)?;
        self.forward(x, &mut KVCache::new(&self.dims, b))
    }
}

/// Calibration record of one layer: statistics plus the captured tensors used
/// as GPTQ inputs (model order).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCalibration {
    pub stats: LayerStats,
    pub inputs: SiteActivations,
}

/// Runs the full-precision model on `x` and records every site of every layer.
pub fn calibrate(model: &ToyModel, x: &Tensor) -> Result<Vec<LayerCalibration>> {
    let (b, _, _) = dims3(x)?;
    let mut cache = KVCache::new(&model.dims, b);
    let mut h = x.clone();
    let mut out = Vec::with_capacity(model.layers.len());
    for (l, kv) in model.layers.iter().zip(cache.layers.iter_mut()) {
        let mut acts = SiteActivations { sites: BTreeMap::new() };
        h = l.forward(&h, kv, Some(&mut acts))?;
        let mut stats = LayerStats::new(&model.dims);
        stats.collect(&acts, b)?;
        out.push(LayerCalibration { stats, inputs: acts });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizeOptions {
    pub bits: BitConfig,
    pub weights: String,
    pub forward: String,
    pub gptq: GptqConfig,
    /// Calibration rows handed to GPTQ per linear layer.
    pub gptq_rows: usize,
}

impl QuantizeOptions {
    pub fn new(bits: BitConfig) -> Self {
        Self {
            bits,
            weights: "gptq".into(),
            forward: "dequant".into(),
            gptq: GptqConfig::default(),
            gptq_rows: 2048,
        }
    }
}

/// Static activation parameters of one layer, in reordered channel order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteParams {
    pub sites: BTreeMap<Site, Vec<QuantParams>>,
    pub probs: QuantParams,
}

impl SiteParams {
    pub fn get(&self, site: Site) -> Result<&[QuantParams]> {
        self.sites
            .get(&site)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingStats(format!("no activation parameters for {site}")))
    }
}

/// Squared-error totals of every quantized activation site.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SiteErrors {
    pub sites: BTreeMap<Site, (f64, u64)>,
}

impl SiteErrors {
    fn add(&mut self, site: Site, exact: &Tensor, approx: &Tensor) {
        let n = exact.numel() as u64;
        let e = self.sites.entry(site).or_insert((0.0, 0));
        e.0 += mse(approx.data(), exact.data()) * n as f64;
        e.1 += n;
    }

    pub fn mse(&self, site: Site) -> Option<f64> {
        self.sites.get(&site).map(|(s, n)| s / *n as f64)
    }

    pub fn merge(&mut self, other: &SiteErrors) {
        for (k, (s, n)) in &other.sites {
            let e = self.sites.entry(*k).or_insert((0.0, 0));
            e.0 += s;
            e.1 += n;
        }
    }
}

pub struct QuantizedDecoderLayer {
    pub bits: BitConfig,
    pub plan: DecoderLayerPlan,
    pub ln1: LayerNormOp,
    pub ln2: LayerNormOp,
    pub q_proj: ClusteredQuantLinear,
    pub k_proj: ClusteredQuantLinear,
    pub v_proj: ClusteredQuantLinear,
    pub out_proj: ClusteredQuantLinear,
    pub fc1: ClusteredQuantLinear,
    pub fc2: ClusteredQuantLinear,
    pub params: SiteParams,
    pub forward_method: Arc<dyn ForwardMethod>,
}

impl fmt::Debug for QuantizedDecoderLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("QuantizedDecoderLayer")
            .field("bits", &self.bits)
            .field("counts", &self.plan.counts)
            .field("forward", &self.forward_method.name())
            .finish_non_exhaustive()
    }
}

/// Site plan and bit width of each activation site.
fn site_layout(plan: &DecoderLayerPlan, bits: &BitConfig) -> Vec<(Site, ReorderPlan, u8)> {
    let (r2, r3) = (plan.r2(), plan.r3());
    let ln = bits.ln_softmax_bits();
    let a = bits.activation_bits;
    vec![
        (Site::Ln1Out, plan.r1.clone(), ln),
        (Site::Q, r2.clone(), a),
        (Site::K, r2, bits.kv_bits),
        (Site::V, r3.clone(), bits.kv_bits),
        (Site::AttnOut, r3, a),
        (Site::Ln2Out, plan.r4.clone(), ln),
        (Site::Fc1Out, plan.r5.clone(), a),
    ]
}

/// Per-cluster activation parameters from model-order stats.
pub fn site_params(stats: &LayerStats, plan: &DecoderLayerPlan, bits: &BitConfig) -> Result<SiteParams> {
    let mut sites = BTreeMap::new();
    for (site, p, b) in site_layout(plan, bits) {
        let s = stats.get(site)?.permuted(&p.perm)?;
        sites.insert(site, activation_params(&s, &p, b)?);
    }
    Ok(SiteParams {
        sites,
        probs: minmax_params(0.0, 1.0, bits.ln_softmax_bits())?,
    })
}

fn calib_rows(t: &Tensor, perm: &[usize], max_rows: usize) -> Result<Tensor> {
    let rows = t.rows().min(max_rows.max(1));
    let c = t.last_dim();
    let head = Tensor::new(vec![rows, c], t.data()[..rows * c].to_vec())?;
    head.permute_last_axis(perm)
}

/// Fuses the plan into the weights, quantizes every linear layer and derives
/// static activation parameters.
pub fn quantize_layer(
    w: &DecoderLayerWeights,
    plan: &DecoderLayerPlan,
    calib: &LayerCalibration,
    opts: &QuantizeOptions,
) -> Result<QuantizedDecoderLayer> {
    opts.bits.validate()?;
    let fused = fuse_layer(w, plan)?;
    let quantizer = weight_quantizers(opts.gptq).get(&opts.weights)?;
    let forward_method = forward_methods().get(&opts.forward)?;
    let needs_calib = opts.weights != "rtn";
    let input = |site: Site, p: &ReorderPlan| -> Result<Option<Tensor>> {
        if needs_calib {
            Ok(Some(calib_rows(calib.inputs.get(site)?, &p.perm, opts.gptq_rows)?))
        } else {
            Ok(None)
        }
    };
    let r3 = plan.r3();
    let wb = opts.bits.weight_bits;
    let x1 = input(Site::Ln1Out, &plan.r1)?;
    let xo = input(Site::AttnOut, &r3)?;
    let x4 = input(Site::Ln2Out, &plan.r4)?;
    let x5 = input(Site::Fc1Out, &plan.r5)?;
    let q = |lin: &LinearWeights, x: &Option<Tensor>| ClusteredQuantLinear::from_linear(lin, quantizer.as_ref(), x.as_ref(), wb);
    let params = site_params(&calib.stats, plan, &opts.bits)?;
    Ok(QuantizedDecoderLayer {
        bits: opts.bits,
        plan: plan.clone(),
        ln1: fused.ln1.clone(),
        ln2: fused.ln2.clone(),
        q_proj: q(&fused.q_proj, &x1)?,
        k_proj: q(&fused.k_proj, &x1)?,
        v_proj: q(&fused.v_proj, &x1)?,
        out_proj: q(&fused.out_proj, &xo)?,
        fc1: q(&fused.fc1, &x4)?,
        fc2: q(&fused.fc2, &x5)?,
        params,
        forward_method,
    })
}

impl QuantizedDecoderLayer {
    fn site_plan(&self, site: Site) -> ReorderPlan {
        match site {
            Site::Ln1Out => self.plan.r1.clone(),
            Site::Q | Site::K => self.plan.r2(),
            Site::V | Site::AttnOut => self.plan.r3(),
            Site::Ln2Out => self.plan.r4.clone(),
            Site::Fc1Out => self.plan.r5.clone(),
        }
    }

    /// Quantized linear on a float input: quantize at `site`, then run the
    /// configured forward method. KV-only modes skip activation quantization.
    fn qlinear(&self, site: Site, x: &Tensor, lin: &ClusteredQuantLinear, errs: &mut Option<&mut SiteErrors>) -> Result<Tensor> {
        if !self.bits.quantizes_activations() {
            return lin.forward_float(x);
        }
        let plan = self.site_plan(site);
        let params = self.params.get(site)?;
        let xq = quantize_with_params(x, &plan, params)?;
        if let Some(e) = errs.as_deref_mut() {
            e.add(site, x, &dequantize_with_params(&xq, &plan, params)?);
        }
        self.forward_method.forward(&xq, params, lin)
    }

    fn fake_quant(&self, site: Site, x: &Tensor, errs: &mut Option<&mut SiteErrors>) -> Result<Tensor> {
        let plan = self.site_plan(site);
        let params = self.params.get(site)?;
        let y = dequantize_with_params(&quantize_with_params(x, &plan, params)?, &plan, params)?;
        if let Some(e) = errs.as_deref_mut() {
            e.add(site, x, &y);
        }
        Ok(y)
    }

    /// One layer step. `x` and the output are in model channel order; K/V
    /// are appended to `cache` in quantized form.
    pub fn forward(&self, x: &Tensor, cache: &mut LayerKV, mut errs: Option<&mut SiteErrors>) -> Result<Tensor> {
        let wa = self.bits.quantizes_activations();
        let a = self.ln1.forward(x)?;
        let mut q = self.qlinear(Site::Ln1Out, &a, &self.q_proj, &mut errs)?;
        let k = self.qlinear(Site::Ln1Out, &a, &self.k_proj, &mut errs)?;
        let v = self.qlinear(Site::Ln1Out, &a, &self.v_proj, &mut errs)?;
        if wa {
            q = self.fake_quant(Site::Q, &q, &mut errs)?;
        }
        let (r2, r3) = (self.plan.r2(), self.plan.r3());
        let aq = AttentionQuant {
            k: (&r2, self.params.get(Site::K)?),
            v: (&r3, self.params.get(Site::V)?),
            probs: wa.then_some(self.params.probs),
        };
        if let Some(e) = errs.as_deref_mut() {
            for (site, t, p) in [(Site::K, &k, &aq.k), (Site::V, &v, &aq.v)] {
                let hat = dequantize_with_params(&quantize_with_params(t, p.0, p.1)?, p.0, p.1)?;
                e.add(site, t, &hat);
            }
        }
        let o = attention(&q, &k, &v, cache, Some(&aq))?;
        let h = add(x, &self.qlinear(Site::AttnOut, &o, &self.out_proj, &mut errs)?)?;
        let b = self.ln2.forward(&h)?;
        let f = relu(self.qlinear(Site::Ln2Out, &b, &self.fc1, &mut errs)?)?;
        add(&h, &self.qlinear(Site::Fc1Out, &f, &self.fc2, &mut errs)?)
    }
}

/// One quantized layer step.
pub fn run_layer(x: &Tensor, layer: &QuantizedDecoderLayer, cache: &mut LayerKV) -> Result<Tensor> {
    layer.forward(x, cache, None)
}

#[derive(Debug)]
pub struct QuantizedModel {
    pub dims: ModelDims,
    pub layers: Vec<QuantizedDecoderLayer>,
}

impl QuantizedModel {
    pub fn forward(&self, x: &Tensor, cache: &mut KVCache, mut errs: Option<&mut SiteErrors>) -> Result<Tensor> {
        if cache.layers.len() != self.layers.len() {
            return Err(Error::CacheMismatch(format!(
                "cache has {} layers, model {}",
                cache.layers.len(),
                self.layers.len()
            )));
        }
        let mut h = x.clone();
        for (l, kv) in self.layers.iter().zip(cache.layers.iter_mut()) {
            h = l.forward(&h, kv, errs.as_deref_mut())?;
        }
        Ok(h)
    }

    pub fn forward_fresh(&self, x: &Tensor, errs: Option<&mut SiteErrors>) -> Result<Tensor> {
        let (b, _, _) = dims3(x)?;
        self.forward(x, &mut KVCache::new(&self.dims, b), errs)
    }
}

/// Plans and quantizes every layer of `model` from its calibration records.
pub fn quantize_model(
    model: &ToyModel,
    calib: &[LayerCalibration],
    plans: &[DecoderLayerPlan],
    opts: &QuantizeOptions,
) -> Result<QuantizedModel> {
    if calib.len() != model.layers.len() || plans.len() != model.layers.len() {
        return Err(Error::InvalidConfig(format!(
            "{} layers, {} calibration records, {} plans",
            model.layers.len(),
            calib.len(),
            plans.len()
        )));
    }
    let layers = model
        .layers
        .iter()
        .zip(calib)
        .zip(plans)
        .map(|((w, c), p)| quantize_layer(w, p, c, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedModel { dims: model.dims, layers })
}

pub fn plan_model(
    calib: &[LayerCalibration],
    dims: &ModelDims,
    counts: &ClusterCounts,
    grouping: &dyn GroupingStrategy,
    seed: u64,
) -> Result<Vec<DecoderLayerPlan>> {
    calib
        .iter()
        .enumerate()
        .map(|(l, c)| plan_layer(&c.stats, dims, counts, grouping, seed.wrapping_add(1000 * l as u64)))
        .collect()
}

/// Inverse of a reorder: brings a reordered `[.., C]` tensor back to model order.
pub fn restore_order(x: &Tensor, plan: &ReorderPlan) -> Result<Tensor> {
    x.permute_last_axis(&invert_permutation(&plan.perm)?)
}
