//! Cluster-wise quantized linear layers.
//!
//! Activations entering a layer are in reordered channel order and split into
//! the `g` clusters of the input plan; each cluster has its own activation
//! scale and zero point. Weight column block `i` (the columns of cluster `i`)
//! is quantized with its own Min-Max grid per output row, so a layer carries
//! `g x C2` weight parameter sets.
//!
//! Two forward paths are provided. [`forward_dequant`] reconstructs float
//! activations and weights and multiplies them. [`forward_integer`] multiplies
//! the integer codes per cluster and applies the zero-point corrections:
//!
//! ```text
//! Yq_i = sum_c xq_c wq_c - zx_i sum_c wq_c - zw_i sum_c xq_c + n_i zx_i zw_i
//! Y    = bias + sum_i sx_i sw_i Yq_i
//! ```

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::calib::ChannelStats;
use crate::cluster::ReorderPlan;
use crate::error::{Error, Result};
use crate::fusion::LinearWeights;
use crate::quant::{minmax_params, QuantParams};
use crate::strategy::{ForwardMethod, WeightQuantizer};
use crate::tensor::{linear, IntTensor, Tensor};

/// Largest input width the integer path accepts. Dot products of codes up to
/// 16 bits then stay below 2^46 in i64; corrections are summed in i128.
pub const MAX_INTEGER_IN_FEATURES: usize = 1 << 15;

fn check_plan_width(plan: &ReorderPlan, width: usize) -> Result<()> {
    plan.validate()?;
    if plan.len() != width {
        return Err(Error::ShapeMismatch(format!(
            "plan covers {} channels, tensor has {width}",
            plan.len()
        )));
    }
    Ok(())
}

/// Per-cluster activation parameters from reordered channel stats.
pub fn activation_params(stats: &ChannelStats, plan: &ReorderPlan, bits: u8) -> Result<Vec<QuantParams>> {
    if stats.is_empty() {
        return Err(Error::MissingStats("activation stats are empty".into()));
    }
    check_plan_width(plan, stats.channels)?;
    plan.cluster_ranges()
        .into_iter()
        .map(|r| {
            let lo = stats.mins[r.clone()].iter().copied().fold(f32::INFINITY, f32::min);
            let hi = stats.maxs[r].iter().copied().fold(f32::NEG_INFINITY, f32::max);
            minmax_params(lo, hi, bits)
        })
        .collect()
}

/// Quantizes reordered activations with one parameter set per cluster.
pub fn quantize_with_params(x: &Tensor, plan: &ReorderPlan, params: &[QuantParams]) -> Result<IntTensor> {
    check_plan_width(plan, x.last_dim())?;
    if params.len() != plan.g {
        return Err(Error::ShapeMismatch(format!(
            "{} parameter sets for {} clusters",
            params.len(),
            plan.g
        )));
    }
    let bits = params[0].bits;
    if params.iter().any(|p| p.bits != bits) {
        return Err(Error::InvalidParams("clusters of one tensor must share a bit width".into()));
    }
    let cluster = plan.cluster_of_position();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.row_iter() {
        out.extend(row.iter().zip(&cluster).map(|(&v, &c)| params[c].quantize(v)));
    }
    IntTensor::new(x.shape().to_vec(), out, bits)
}

pub fn dequantize_with_params(xq: &IntTensor, plan: &ReorderPlan, params: &[QuantParams]) -> Result<Tensor> {
    check_plan_width(plan, xq.last_dim())?;
    if params.len() != plan.g {
        return Err(Error::ShapeMismatch(format!(
            "{} parameter sets for {} clusters",
            params.len(),
            plan.g
        )));
    }
    let cluster = plan.cluster_of_position();
    let c = xq.last_dim();
    let data = xq
        .data()
        .iter()
        .enumerate()
        .map(|(i, &q)| params[cluster[i % c]].dequantize(q))
        .collect();
    Tensor::new(xq.shape().to_vec(), data)
}

/// Static cluster-wise activation quantization. `stats` must already be in plan order.
pub fn quantize_activations(
    x: &Tensor,
    plan: &ReorderPlan,
    stats: &ChannelStats,
    bits: u8,
) -> Result<(IntTensor, Vec<QuantParams>)> {
    if stats.channels != x.last_dim() {
        return Err(Error::ChannelMismatch {
            expected: stats.channels,
            got: x.last_dim(),
        });
    }
    let params = activation_params(stats, plan, bits)?;
    let xq = quantize_with_params(x, plan, &params)?;
    Ok((xq, params))
}

/// Quantized `[out, in]` weights and their `g x out` grids, indexed `cluster * out + row`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedWeights {
    pub wq: IntTensor,
    pub params: Vec<QuantParams>,
}

impl QuantizedWeights {
    pub fn param(&self, cluster: usize, row: usize) -> &QuantParams {
        &self.params[cluster * self.wq.shape()[0] + row]
    }

    pub fn dequantize(&self, plan: &ReorderPlan) -> Result<Tensor> {
        let (c2, c1) = (self.wq.shape()[0], self.wq.shape()[1]);
        check_plan_width(plan, c1)?;
        let cluster = plan.cluster_of_position();
        let mut data = Vec::with_capacity(c2 * c1);
        for o in 0..c2 {
            for (c, &q) in self.wq.row(o).iter().enumerate() {
                data.push(self.param(cluster[c], o).dequantize(q));
            }
        }
        Tensor::new(vec![c2, c1], data)
    }
}

fn check_weight(w: &Tensor, plan: &ReorderPlan) -> Result<(usize, usize)> {
    if w.shape().len() != 2 {
        return Err(Error::ShapeMismatch(format!("weight must be 2-D, got {:?}", w.shape())));
    }
    check_plan_width(plan, w.shape()[1])?;
    Ok((w.shape()[0], w.shape()[1]))
}

/// Min-Max grid of every (input cluster, output row) weight slice.
pub fn weight_grids(w: &Tensor, plan: &ReorderPlan, bits: u8) -> Result<Vec<QuantParams>> {
    let (c2, _) = check_weight(w, plan)?;
    let mut params = Vec::with_capacity(plan.g * c2);
    for r in plan.cluster_ranges() {
        for o in 0..c2 {
            let slice = &w.row(o)[r.clone()];
            let lo = slice.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = slice.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            params.push(minmax_params(lo, hi, bits)?);
        }
    }
    Ok(params)
}

/// Round-to-nearest onto the per-slice Min-Max grids.
pub fn quantize_weights_rtn(w: &Tensor, plan: &ReorderPlan, bits: u8) -> Result<QuantizedWeights> {
    let (c2, c1) = check_weight(w, plan)?;
    let params = weight_grids(w, plan, bits)?;
    let cluster = plan.cluster_of_position();
    let mut codes = Vec::with_capacity(c2 * c1);
    for o in 0..c2 {
        for (c, &v) in w.row(o).iter().enumerate() {
            codes.push(params[cluster[c] * c2 + o].quantize(v));
        }
    }
    Ok(QuantizedWeights {
        wq: IntTensor::new(vec![c2, c1], codes, bits)?,
        params,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GptqConfig {
    /// Diagonal damping as a fraction of the mean Hessian diagonal.
    pub damp: f64,
    /// Let error compensation flow into later clusters instead of stopping at
    /// the cluster boundary.
    pub cross_cluster: bool,
}

impl Default for GptqConfig {
    fn default() -> Self {
        Self {
            damp: 0.01,
            cross_cluster: false,
        }
    }
}

/// Upper Cholesky factor of the inverse of `h`, the form the GPTQ sweep reads rows from.
fn inverse_cholesky_upper(h: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = h
        .cholesky()
        .ok_or_else(|| Error::SingularHessian("damped Hessian is not positive definite".into()))?;
    let inv = chol.inverse();
    let lower = inv
        .cholesky()
        .ok_or_else(|| Error::SingularHessian("inverse Hessian lost definiteness".into()))?
        .unpack();
    Ok(lower.transpose())
}

/// GPTQ with Min-Max grids fixed per (cluster, output row) before the sweep.
///
/// Columns are visited in reordered order. After column `j` is rounded, the
/// remaining columns of its block absorb the error through row `j` of the
/// upper Cholesky factor of the damped inverse Hessian. Blocks are the input
/// clusters unless `cross_cluster` is set.
pub fn quantize_weights_gptq(
    w: &Tensor,
    x_calib: &Tensor,
    plan: &ReorderPlan,
    bits: u8,
    cfg: &GptqConfig,
) -> Result<QuantizedWeights> {
    let (c2, c1) = check_weight(w, plan)?;
    if x_calib.last_dim() != c1 {
        return Err(Error::ChannelMismatch {
            expected: c1,
            got: x_calib.last_dim(),
        });
    }
    let params = weight_grids(w, plan, bits)?;
    let cluster = plan.cluster_of_position();

    let mut h = DMatrix::<f64>::zeros(c1, c1);
    for row in x_calib.row_iter() {
        for i in 0..c1 {
            let xi = row[i] as f64;
            if xi == 0.0 {
                continue;
            }
            for j in i..c1 {
                h[(i, j)] += xi * row[j] as f64;
            }
        }
    }
    for i in 0..c1 {
        for j in 0..i {
            h[(i, j)] = h[(j, i)];
        }
    }
    let mean_diag = h.diagonal().mean();
    if !(mean_diag > 0.0) || !mean_diag.is_finite() {
        return Err(Error::SingularHessian(
            "calibration activations have zero energy".into(),
        ));
    }
    let lambda = cfg.damp * mean_diag;

    let blocks = if cfg.cross_cluster {
        vec![0..c1]
    } else {
        plan.cluster_ranges()
    };

    let mut work: Vec<f64> = w.data().iter().map(|&v| v as f64).collect();
    let mut codes = vec![0i32; c2 * c1];
    for block in blocks {
        let n = block.len();
        let mut hb = h.view((block.start, block.start), (n, n)).clone_owned();
        for i in 0..n {
            hb[(i, i)] += lambda;
        }
        let u = inverse_cholesky_upper(hb)?;
        for jj in 0..n {
            let j = block.start + jj;
            let d = u[(jj, jj)];
            for o in 0..c2 {
                let p = &params[cluster[j] * c2 + o];
                let v = work[o * c1 + j] as f32;
                let q = p.quantize(v);
                codes[o * c1 + j] = q;
                let err = (work[o * c1 + j] - p.dequantize(q) as f64) / d;
                for kk in jj + 1..n {
                    work[o * c1 + block.start + kk] -= err * u[(jj, kk)];
                }
            }
        }
    }
    Ok(QuantizedWeights {
        wq: IntTensor::new(vec![c2, c1], codes, bits)?,
        params,
    })
}

/// `||X W^T - X W_hat^T||_F^2`, the layer-wise objective GPTQ minimises.
pub fn layer_loss(x: &Tensor, w: &Tensor, w_hat: &Tensor) -> Result<f64> {
    let a = linear(x, w, None)?;
    let b = linear(x, w_hat, None)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| {
            let d = *p as f64 - *q as f64;
            d * d
        })
        .sum())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RtnQuantizer;

impl WeightQuantizer for RtnQuantizer {
    fn name(&self) -> &'static str {
        "rtn"
    }

    fn quantize(&self, w: &Tensor, plan: &ReorderPlan, _calib: Option<&Tensor>, bits: u8) -> Result<QuantizedWeights> {
        quantize_weights_rtn(w, plan, bits)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GptqQuantizer {
    pub config: GptqConfig,
}

impl GptqQuantizer {
    pub fn new(config: GptqConfig) -> Self {
        Self { config }
    }
}

impl WeightQuantizer for GptqQuantizer {
    fn name(&self) -> &'static str {
        "gptq"
    }

    fn quantize(&self, w: &Tensor, plan: &ReorderPlan, calib: Option<&Tensor>, bits: u8) -> Result<QuantizedWeights> {
        let x = calib.ok_or_else(|| {
            Error::InvalidConfig("gptq needs calibration activations for every linear layer".into())
        })?;
        quantize_weights_gptq(w, x, plan, bits, &self.config)
    }
}

/// Reordered, cluster-wise quantized weights of one linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredQuantLinear {
    pub weights: QuantizedWeights,
    pub in_plan: ReorderPlan,
    pub out_plan: ReorderPlan,
    pub bias: Vec<f32>,
    /// Static activation parameters for the input, one per input cluster.
    pub act_params: Option<Vec<QuantParams>>,
    w_hat: Tensor,
    w_col_sums: Vec<i64>,
}

impl ClusteredQuantLinear {
    pub fn new(
        weights: QuantizedWeights,
        in_plan: ReorderPlan,
        out_plan: ReorderPlan,
        bias: Vec<f32>,
    ) -> Result<Self> {
        let (c2, c1) = (weights.wq.shape()[0], weights.wq.shape()[1]);
        check_plan_width(&in_plan, c1)?;
        check_plan_width(&out_plan, c2)?;
        if bias.len() != c2 {
            return Err(Error::ShapeMismatch(format!("bias length {} != {c2}", bias.len())));
        }
        if weights.params.len() != in_plan.g * c2 {
            return Err(Error::ShapeMismatch(format!(
                "{} weight parameter sets, expected {} clusters x {c2} rows",
                weights.params.len(),
                in_plan.g
            )));
        }
        if c1 > MAX_INTEGER_IN_FEATURES {
            return Err(Error::OverflowEnvelope(format!(
                "{c1} input features exceeds {MAX_INTEGER_IN_FEATURES}"
            )));
        }
        let w_hat = weights.dequantize(&in_plan)?;
        let ranges = in_plan.cluster_ranges();
        let mut w_col_sums = Vec::with_capacity(in_plan.g * c2);
        for r in &ranges {
            for o in 0..c2 {
                w_col_sums.push(weights.wq.row(o)[r.clone()].iter().map(|&q| q as i64).sum());
            }
        }
        Ok(Self {
            weights,
            in_plan,
            out_plan,
            bias,
            act_params: None,
            w_hat,
            w_col_sums,
        })
    }

    /// Quantizes a fused linear layer; missing plans mean model order.
    pub fn from_linear(
        lin: &LinearWeights,
        quantizer: &dyn WeightQuantizer,
        calib: Option<&Tensor>,
        bits: u8,
    ) -> Result<Self> {
        let in_plan = lin
            .in_plan
            .clone()
            .unwrap_or_else(|| ReorderPlan::identity(lin.in_features()));
        let out_plan = lin
            .out_plan
            .clone()
            .unwrap_or_else(|| ReorderPlan::identity(lin.out_features()));
        let weights = quantizer.quantize(&lin.w, &in_plan, calib, bits)?;
        Self::new(weights, in_plan, out_plan, lin.bias.clone())
    }

    pub fn with_act_params(mut self, params: Vec<QuantParams>) -> Result<Self> {
        if params.len() != self.in_plan.g {
            return Err(Error::ShapeMismatch(format!(
                "{} activation parameter sets for {} clusters",
                params.len(),
                self.in_plan.g
            )));
        }
        self.act_params = Some(params);
        Ok(self)
    }

    pub fn in_features(&self) -> usize {
        self.weights.wq.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weights.wq.shape()[0]
    }

    /// Dequantized weights `[out, in]`.
    pub fn weight_hat(&self) -> &Tensor {
        &self.w_hat
    }

    /// Float activations times dequantized weights, for paths that keep activations unquantized.
    pub fn forward_float(&self, x: &Tensor) -> Result<Tensor> {
        linear(x, &self.w_hat, Some(&self.bias))
    }

    fn check_input(&self, xq: &IntTensor, act_params: &[QuantParams]) -> Result<()> {
        if xq.last_dim() != self.in_features() {
            return Err(Error::ChannelMismatch {
                expected: self.in_features(),
                got: xq.last_dim(),
            });
        }
        if act_params.len() != self.in_plan.g {
            return Err(Error::ShapeMismatch(format!(
                "{} activation parameter sets for {} input clusters",
                act_params.len(),
                self.in_plan.g
            )));
        }
        Ok(())
    }
}

pub fn forward_dequant(
    xq: &IntTensor,
    act_params: &[QuantParams],
    layer: &ClusteredQuantLinear,
) -> Result<Tensor> {
    layer.check_input(xq, act_params)?;
    let x_hat = dequantize_with_params(xq, &layer.in_plan, act_params)?;
    linear(&x_hat, &layer.w_hat, Some(&layer.bias))
}

/// Per-row, per-output, per-cluster integer terms `Yq_i`, flattened as `[rows, out, g]`.
pub fn integer_partials(
    xq: &IntTensor,
    act_params: &[QuantParams],
    layer: &ClusteredQuantLinear,
) -> Result<Vec<i128>> {
    layer.check_input(xq, act_params)?;
    let (c2, g) = (layer.out_features(), layer.in_plan.g);
    let ranges = layer.in_plan.cluster_ranges();
    let mut out = Vec::with_capacity(xq.rows() * c2 * g);
    let mut x_sums = vec![0i64; g];
    for ri in 0..xq.rows() {
        let xr = xq.row(ri);
        for (s, r) in x_sums.iter_mut().zip(&ranges) {
            *s = xr[r.clone()].iter().map(|&q| q as i64).sum();
        }
        for o in 0..c2 {
            let wr = layer.weights.wq.row(o);
            for (i, r) in ranges.iter().enumerate() {
                let dot: i64 = xr[r.clone()]
                    .iter()
                    .zip(&wr[r.clone()])
                    .map(|(&a, &b)| a as i64 * b as i64)
                    .sum();
                let zx = act_params[i].zero_point as i128;
                let zw = layer.weights.param(i, o).zero_point as i128;
                let n = r.len() as i128;
                out.push(
                    dot as i128 - zx * layer.w_col_sums[i * c2 + o] as i128 - zw * x_sums[i] as i128
                        + n * zx * zw,
                );
            }
        }
    }
    Ok(out)
}

pub fn forward_integer(
    xq: &IntTensor,
    act_params: &[QuantParams],
    layer: &ClusteredQuantLinear,
) -> Result<Tensor> {
    let partials = integer_partials(xq, act_params, layer)?;
    let (c2, g) = (layer.out_features(), layer.in_plan.g);
    let mut data = Vec::with_capacity(xq.rows() * c2);
    for (k, chunk) in partials.chunks_exact(g).enumerate() {
        let o = k % c2;
        let mut acc = layer.bias[o] as f64;
        for (i, &yq) in chunk.iter().enumerate() {
            let s = act_params[i].scale as f64 * layer.weights.param(i, o).scale as f64;
            acc += s * yq as f64;
        }
        data.push(acc as f32);
    }
    let mut shape = xq.shape().to_vec();
    *shape.last_mut().unwrap() = c2;
    Tensor::new(shape, data)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct DequantForward;

impl ForwardMethod for DequantForward {
    fn name(&self) -> &'static str {
        "dequant"
    }

    fn forward(&self, xq: &IntTensor, act_params: &[QuantParams], layer: &ClusteredQuantLinear) -> Result<Tensor> {
        forward_dequant(xq, act_params, layer)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct IntegerForward;

impl ForwardMethod for IntegerForward {
    fn name(&self) -> &'static str {
        "integer"
    }

    fn forward(&self, xq: &IntTensor, act_params: &[QuantParams], layer: &ClusteredQuantLinear) -> Result<Tensor> {
        forward_integer(xq, act_params, layer)
    }
}
