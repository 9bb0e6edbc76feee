//! Folding reorders into layer norms and linear weights.
//!
//! A reordered layer norm computes the ordinary normalization and writes
//! channel `perm[i]` to output slot `i`; gamma and beta stay in model order.
//! A fused linear has its columns permuted by the input plan and its rows by
//! the output plan, so it consumes and produces reordered activations directly.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cluster::ReorderPlan;
use crate::error::{Error, Result};
use crate::tensor::{linear, validate_permutation, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNormOp {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub eps: f32,
    pub out_plan: Option<ReorderPlan>,
}

impl LayerNormOp {
    pub fn new(gamma: Vec<f32>, beta: Vec<f32>, eps: f32) -> Result<Self> {
        if gamma.len() != beta.len() {
            return Err(Error::ShapeMismatch(format!(
                "gamma has {} channels, beta {}",
                gamma.len(),
                beta.len()
            )));
        }
        Ok(Self {
            gamma,
            beta,
            eps,
            out_plan: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn with_plan(mut self, plan: Option<ReorderPlan>) -> Result<Self> {
        if let Some(p) = &plan {
            validate_permutation(&p.perm, self.channels())?;
        }
        self.out_plan = plan;
        Ok(self)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layernorm_forward(self, x)
    }
}

pub fn layernorm_forward(ln: &LayerNormOp, x: &Tensor) -> Result<Tensor> {
    let c = ln.channels();
    if x.last_dim() != c {
        return Err(Error::ChannelMismatch {
            expected: c,
            got: x.last_dim(),
        });
    }
    let mut out = vec![0.0f32; x.numel()];
    let mut normed = vec![0.0f32; c];
    for (row, dst) in x.row_iter().zip(out.chunks_exact_mut(c)) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
        let var = row
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / c as f64;
        let inv = 1.0 / (var + ln.eps as f64).sqrt();
        for (i, &v) in row.iter().enumerate() {
            normed[i] = ((v as f64 - mean) * inv * ln.gamma[i] as f64 + ln.beta[i] as f64) as f32;
        }
        match &ln.out_plan {
            Some(p) => {
                for (d, &src) in dst.iter_mut().zip(&p.perm) {
                    *d = normed[src];
                }
            }
            None => dst.copy_from_slice(&normed),
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// A linear layer `y = x W^T + b` with `W: [out, in]`, plus the reorder plans
/// already folded into it (`None` means model order).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearWeights {
    pub w: Tensor,
    pub bias: Vec<f32>,
    pub in_plan: Option<ReorderPlan>,
    pub out_plan: Option<ReorderPlan>,
}

impl LinearWeights {
    pub fn new(w: Tensor, bias: Vec<f32>) -> Result<Self> {
        if w.shape().len() != 2 || w.shape()[0] != bias.len() {
            return Err(Error::ShapeMismatch(format!(
                "weight {:?} with bias of length {}",
                w.shape(),
                bias.len()
            )));
        }
        Ok(Self {
            w,
            bias,
            in_plan: None,
            out_plan: None,
        })
    }

    pub fn out_features(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        linear(x, &self.w, Some(&self.bias))
    }

    /// `w'[r, c] = w[out_perm[r], in_perm[c]]`, `b'[r] = b[out_perm[r]]`. Plans are left untouched.
    pub fn permuted(&self, in_perm: &[usize], out_perm: &[usize]) -> Result<LinearWeights> {
        let (c2, c1) = (self.out_features(), self.in_features());
        validate_permutation(in_perm, c1)?;
        validate_permutation(out_perm, c2)?;
        let src = self.w.data();
        let mut data = Vec::with_capacity(c2 * c1);
        for &r in out_perm {
            let row = &src[r * c1..(r + 1) * c1];
            data.extend(in_perm.iter().map(|&c| row[c]));
        }
        Ok(LinearWeights {
            w: Tensor::new(vec![c2, c1], data)?,
            bias: out_perm.iter().map(|&r| self.bias[r]).collect(),
            in_plan: self.in_plan.clone(),
            out_plan: self.out_plan.clone(),
        })
    }
}

/// Folds the reorders into a linear layer given in model channel order.
pub fn fuse_linear(
    lin: &LinearWeights,
    in_plan: Option<&ReorderPlan>,
    out_plan: Option<&ReorderPlan>,
) -> Result<LinearWeights> {
    if lin.in_plan.is_some() || lin.out_plan.is_some() {
        return Err(Error::InvalidConfig(
            "fuse_linear expects weights in model channel order".into(),
        ));
    }
    let ident_in: Vec<usize> = (0..lin.in_features()).collect();
    let ident_out: Vec<usize> = (0..lin.out_features()).collect();
    let in_perm = in_plan.map_or(&ident_in[..], |p| &p.perm[..]);
    let out_perm = out_plan.map_or(&ident_out[..], |p| &p.perm[..]);
    if in_perm.len() != lin.in_features() || out_perm.len() != lin.out_features() {
        return Err(Error::ShapeMismatch(format!(
            "plans of length ({}, {}) for weight {:?}",
            in_perm.len(),
            out_perm.len(),
            lin.w.shape()
        )));
    }
    let mut fused = lin.permuted(in_perm, out_perm)?;
    fused.in_plan = in_plan.cloned();
    fused.out_plan = out_plan.cloned();
    Ok(fused)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Projection {
    Q,
    K,
    V,
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Projection::Q => "q_proj",
            Projection::K => "k_proj",
            Projection::V => "v_proj",
        })
    }
}

/// An operation whose two operands must share one channel order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlignmentEdge {
    /// LN1 output feeding a Q/K/V projection.
    Ln1ToProjection(Projection),
    /// A per-head reorder moved a channel into another head.
    HeadBoundary { proj: Projection, head: usize },
    QkMatmul { head: usize },
    /// Attention output (V order) feeding the out projection.
    AttentionToOutProj,
    /// Layer input + out projection output.
    ResidualAttention,
    Ln2ToFc1,
    Fc1ToFc2,
    /// Attention residual + final linear output.
    ResidualFfn,
}

impl fmt::Display for AlignmentEdge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlignmentEdge::Ln1ToProjection(p) => write!(f, "ln1 -> {p}"),
            AlignmentEdge::HeadBoundary { proj, head } => write!(f, "{proj} head {head} boundary"),
            AlignmentEdge::QkMatmul { head } => write!(f, "qk-matmul head {head}"),
            AlignmentEdge::AttentionToOutProj => f.write_str("attention -> out_proj"),
            AlignmentEdge::ResidualAttention => f.write_str("residual add (out_proj)"),
            AlignmentEdge::Ln2ToFc1 => f.write_str("ln2 -> fc1"),
            AlignmentEdge::Fc1ToFc2 => f.write_str("fc1 -> fc2"),
            AlignmentEdge::ResidualFfn => f.write_str("residual add (fc2)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentViolation {
    pub edge: AlignmentEdge,
    pub left: Vec<usize>,
    pub right: Vec<usize>,
}

/// Channel orders (as permutations of model order) of one linear layer's input and output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearOrders {
    pub input: Vec<usize>,
    pub output: Vec<usize>,
}

impl LinearOrders {
    pub fn of(lin: &LinearWeights) -> Self {
        Self {
            input: lin
                .in_plan
                .as_ref()
                .map_or_else(|| (0..lin.in_features()).collect(), |p| p.perm.clone()),
            output: lin
                .out_plan
                .as_ref()
                .map_or_else(|| (0..lin.out_features()).collect(), |p| p.perm.clone()),
        }
    }
}

/// Channel orders at every tensor boundary of one decoder layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerWiring {
    pub heads: usize,
    pub ln1_out: Vec<usize>,
    pub q_proj: LinearOrders,
    pub k_proj: LinearOrders,
    pub v_proj: LinearOrders,
    pub out_proj: LinearOrders,
    pub ln2_out: Vec<usize>,
    pub fc1: LinearOrders,
    pub fc2: LinearOrders,
}

fn identity(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Checks every residual, matmul and producer/consumer edge of the layer.
pub fn check_alignment(w: &LayerWiring) -> std::result::Result<(), Vec<AlignmentViolation>> {
    let mut out = Vec::new();
    let mut eq = |edge: AlignmentEdge, left: &[usize], right: &[usize]| {
        if left != right {
            out.push(AlignmentViolation {
                edge,
                left: left.to_vec(),
                right: right.to_vec(),
            });
        }
    };
    for (p, o) in [
        (Projection::Q, &w.q_proj),
        (Projection::K, &w.k_proj),
        (Projection::V, &w.v_proj),
    ] {
        eq(AlignmentEdge::Ln1ToProjection(p), &w.ln1_out, &o.input);
    }
    let hidden = w.out_proj.output.len();
    eq(AlignmentEdge::AttentionToOutProj, &w.v_proj.output, &w.out_proj.input);
    eq(AlignmentEdge::ResidualAttention, &identity(hidden), &w.out_proj.output);
    eq(AlignmentEdge::Ln2ToFc1, &w.ln2_out, &w.fc1.input);
    eq(AlignmentEdge::Fc1ToFc2, &w.fc1.output, &w.fc2.input);
    eq(AlignmentEdge::ResidualFfn, &identity(w.fc2.output.len()), &w.fc2.output);

    let width = w.q_proj.output.len();
    if w.heads > 0 && width % w.heads == 0 && w.k_proj.output.len() == width {
        let hd = width / w.heads;
        for head in 0..w.heads {
            let r = head * hd..(head + 1) * hd;
            for (p, o) in [
                (Projection::Q, &w.q_proj),
                (Projection::K, &w.k_proj),
                (Projection::V, &w.v_proj),
            ] {
                if let Some(block) = o.output.get(r.clone()) {
                    if block.iter().any(|c| !r.contains(c)) {
                        let expected: Vec<usize> = r.clone().collect();
                        out.push(AlignmentViolation {
                            edge: AlignmentEdge::HeadBoundary { proj: p, head },
                            left: expected,
                            right: block.to_vec(),
                        });
                    }
                }
            }
            let (qb, kb) = (&w.q_proj.output[r.clone()], &w.k_proj.output[r]);
            if qb != kb {
                out.push(AlignmentViolation {
                    edge: AlignmentEdge::QkMatmul { head },
                    left: qb.to_vec(),
                    right: kb.to_vec(),
                });
            }
        }
    } else {
        out.push(AlignmentViolation {
            edge: AlignmentEdge::QkMatmul { head: 0 },
            left: w.q_proj.output.clone(),
            right: w.k_proj.output.clone(),
        });
    }

    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}
