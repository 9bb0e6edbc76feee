//! Synthetic activations with controllable channel pathologies, plus
//! exhaustive oracles for clustering and layer-wise weight quantization.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cluster::ReorderPlan;
use crate::error::{Error, Result};
use crate::qlinear::{weight_grids, QuantizedWeights};
use crate::tensor::{IntTensor, Tensor};

/// Shape of per-channel activation distributions.
///
/// Ordinary channel `c` draws from `N(offset_c, sigma_c)`. Outlier channels
/// draw Gaussian samples and are rescaled so their largest magnitude equals
/// `outlier_multiplier * u * m`, with `u` uniform in `[1, 2]` (fixed per
/// channel by the profile seed) and `m` the upper median of the ordinary
/// channels' realized absolute maxima. One-sided outliers take `|z|` with a
/// per-channel sign, so the excursion lies entirely above or below zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelProfile {
    pub channels: usize,
    pub outlier_fraction: f64,
    pub outlier_multiplier: f64,
    /// Explicit per-channel centers; empty means drawn from `N(0, offset_spread)`.
    #[serde(default)]
    pub offsets: Vec<f64>,
    #[serde(default)]
    pub offset_spread: f64,
    pub sigma: f64,
    /// Per-channel sigma is `sigma * exp(U(-j, j))`.
    #[serde(default)]
    pub sigma_jitter: f64,
    #[serde(default)]
    pub outlier_one_sided: bool,
    /// Seeds the per-channel parameters; samples use the generator seed.
    pub seed: u64,
}

impl ChannelProfile {
    /// Identically distributed channels.
    pub fn homogeneous(channels: usize) -> Self {
        Self {
            channels,
            outlier_fraction: 0.0,
            outlier_multiplier: 1.0,
            offsets: Vec::new(),
            offset_spread: 0.0,
            sigma: 1.0,
            sigma_jitter: 0.0,
            outlier_one_sided: false,
            seed: 0,
        }
    }

    /// A few one-sided channels reaching 200 to 400 times further than the
    /// rest, over a bed of channels with shifted centers and uneven widths.
    pub fn pathological(channels: usize, seed: u64) -> Self {
        Self {
            channels,
            outlier_fraction: 0.03,
            outlier_multiplier: 200.0,
            offsets: Vec::new(),
            offset_spread: 2.0,
            sigma: 1.0,
            sigma_jitter: 1.0,
            outlier_one_sided: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("channel profile: {m}")));
        if self.channels == 0 {
            return bad("zero channels");
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return bad("outlier fraction outside [0, 1]");
        }
        if !(self.outlier_multiplier >= 1.0) || !self.outlier_multiplier.is_finite() {
            return bad("outlier multiplier below 1");
        }
        if !self.offsets.is_empty() && self.offsets.len() != self.channels {
            return bad("offset count differs from channel count");
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() || !(self.sigma_jitter >= 0.0) || !(self.offset_spread >= 0.0) {
            return bad("non-positive spread");
        }
        Ok(())
    }

    /// Indices of the outlier channels, ascending.
    pub fn outlier_channels(&self) -> Vec<usize> {
        let n = (self.outlier_fraction * self.channels as f64).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6f75_746c);
        let mut idx = sample(&mut rng, self.channels, n.min(self.channels)).into_vec();
        idx.sort_unstable();
        idx
    }

    fn channel_params(&self) -> (Vec<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let offsets = if self.offsets.is_empty() {
            (0..self.channels)
                .map(|_| {
                    if self.offset_spread > 0.0 {
                        Normal::new(0.0, self.offset_spread).unwrap().sample(&mut rng)
                    } else {
                        0.0
                    }
                })
                .collect()
        } else {
            self.offsets.clone()
        };
        let sigmas = (0..self.channels)
            .map(|_| {
                let j = if self.sigma_jitter > 0.0 {
                    rng.random_range(-self.sigma_jitter..self.sigma_jitter)
                } else {
                    0.0
                };
                self.sigma * j.exp()
            })
            .collect();
        (offsets, sigmas)
    }
}

/// Activations `[b, n, C]` following `profile`; a pure function of its arguments.
pub fn gen_activations(profile: &ChannelProfile, b: usize, n: usize, seed: u64) -> Result<Tensor> {
    profile.validate()?;
    let c = profile.channels;
    let rows = b * n;
    if rows == 0 {
        return Err(Error::ZeroAxis(vec![b, n, c]));
    }
    let (offsets, sigmas) = profile.channel_params();
    let outliers = profile.outlier_channels();
    let mut is_outlier = vec![false; c];
    for &o in &outliers {
        is_outlier[o] = true;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    // column-major scratch so each channel can be rescaled in place
    let mut cols: Vec<Vec<f64>> = (0..c)
        .map(|ch| {
            (0..rows)
                .map(|_| {
                    let z: f64 = std_normal.sample(&mut rng);
                    if is_outlier[ch] && profile.outlier_one_sided {
                        z.abs()
                    } else if is_outlier[ch] {
                        z
                    } else {
                        offsets[ch] + sigmas[ch] * z
                    }
                })
                .collect()
        })
        .collect();

    if !outliers.is_empty() {
        let abs_max = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let mut normal: Vec<f64> = (0..c).filter(|&ch| !is_outlier[ch]).map(|ch| abs_max(&cols[ch])).collect();
        normal.sort_by(|a, b| a.total_cmp(b));
        // rank of the overall upper median once outliers sit on top
        let reference = if normal.is_empty() {
            1.0
        } else {
            normal[(c / 2).min(normal.len() - 1)].max(f64::MIN_POSITIVE)
        };
        let mut prng = ChaCha8Rng::seed_from_u64(profile.seed ^ 0x7363_616c);
        let mut sign_rng = ChaCha8Rng::seed_from_u64(profile.seed ^ 0x7369_676e);
        for &ch in &outliers {
            let u: f64 = prng.random_range(1.0..=2.0);
            let sign = if profile.outlier_one_sided && sign_rng.random_bool(0.5) { -1.0 } else { 1.0 };
            let target = profile.outlier_multiplier * u * reference;
            let m = abs_max(&cols[ch]);
            let k = if m > 0.0 { sign * target / m } else { 0.0 };
            for v in &mut cols[ch] {
                *v *= k;
            }
        }
    }

    let mut data = Vec::with_capacity(rows * c);
    for r in 0..rows {
        for col in &cols {
            data.push(col[r] as f32);
        }
    }
    Tensor::new(vec![b, n, c], data)
}

pub const BRUTE_FORCE_MAX_POINTS: usize = 10;
pub const BRUTE_FORCE_MAX_CLUSTERS: usize = 3;

pub fn sse(points: &[Vec<f64>], labels: &[usize], g: usize) -> f64 {
    let dim = points.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; g];
    let mut counts = vec![0usize; g];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p) {
            *s += v;
        }
    }
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| {
            p.iter()
                .zip(&sums[l])
                .map(|(v, s)| {
                    let d = v - s / counts[l] as f64;
                    d * d
                })
                .sum::<f64>()
        })
        .sum()
}

/// Exact minimum within-cluster SSE over all partitions into exactly `g` non-empty clusters.
pub fn brute_force_partition(points: &[Vec<f64>], g: usize) -> Result<(Vec<usize>, f64)> {
    let n = points.len();
    if g == 0 || g > n {
        return Err(Error::ClusterCount { g, n });
    }
    if n > BRUTE_FORCE_MAX_POINTS || g > BRUTE_FORCE_MAX_CLUSTERS {
        return Err(Error::InstanceTooLarge(format!(
            "{n} points in {g} clusters; limit is {BRUTE_FORCE_MAX_POINTS} points, {BRUTE_FORCE_MAX_CLUSTERS} clusters"
        )));
    }
    // restricted growth strings enumerate each partition once
    let mut labels = vec![0usize; n];
    let mut best = (labels.clone(), f64::INFINITY);
    fn rec(
        i: usize,
        used: usize,
        g: usize,
        labels: &mut Vec<usize>,
        points: &[Vec<f64>],
        best: &mut (Vec<usize>, f64),
    ) {
        let n = labels.len();
        if n - i < g - used {
            return;
        }
        if i == n {
            let v = sse(points, labels, g);
            if v < best.1 {
                *best = (labels.clone(), v);
            }
            return;
        }
        for l in 0..(used + 1).min(g) {
            labels[i] = l;
            rec(i + 1, used.max(l + 1), g, labels, points, best);
        }
    }
    rec(0, 0, g, &mut labels, points, &mut best);
    Ok(best)
}

pub const BRUTE_FORCE_MAX_COLUMNS: usize = 3;
pub const BRUTE_FORCE_MAX_BITS: u8 = 2;

/// Exhaustive minimiser of `||X W^T - X W_hat^T||^2` over codes on the same
/// per-slice Min-Max grids the quantizers use. Rows are independent, so each
/// is searched on its own.
pub fn brute_force_gptq(w: &Tensor, x: &Tensor, plan: &ReorderPlan, bits: u8) -> Result<(QuantizedWeights, f64)> {
    if w.shape().len() != 2 {
        return Err(Error::ShapeMismatch(format!("weight must be 2-D, got {:?}", w.shape())));
    }
    let (c2, c1) = (w.shape()[0], w.shape()[1]);
    if c1 > BRUTE_FORCE_MAX_COLUMNS || bits > BRUTE_FORCE_MAX_BITS {
        return Err(Error::InstanceTooLarge(format!(
            "{c1} columns at {bits} bits; limit is {BRUTE_FORCE_MAX_COLUMNS} columns, {BRUTE_FORCE_MAX_BITS} bits"
        )));
    }
    if x.last_dim() != c1 {
        return Err(Error::ChannelMismatch { expected: c1, got: x.last_dim() });
    }
    let params = weight_grids(w, plan, bits)?;
    let cluster = plan.cluster_of_position();
    let levels = 1usize << bits;
    let lo = crate::tensor::qmin(bits);
    let total = levels.pow(c1 as u32);

    let mut codes = vec![0i32; c2 * c1];
    let mut loss = 0.0;
    for o in 0..c2 {
        let wr = w.row(o);
        let mut best = (f64::INFINITY, vec![0i32; c1]);
        for idx in 0..total {
            let mut cand = vec![0i32; c1];
            let mut rest = idx;
            for q in cand.iter_mut() {
                *q = lo + (rest % levels) as i32;
                rest /= levels;
            }
            let mut l = 0.0;
            for xr in x.row_iter() {
                let mut d = 0.0;
                for c in 0..c1 {
                    let wh = params[cluster[c] * c2 + o].dequantize(cand[c]);
                    d += xr[c] as f64 * (wr[c] as f64 - wh as f64);
                }
                l += d * d;
            }
            if l < best.0 {
                best = (l, cand);
            }
        }
        codes[o * c1..(o + 1) * c1].copy_from_slice(&best.1);
        loss += best.0;
    }
    Ok((
        QuantizedWeights {
            wq: IntTensor::new(vec![c2, c1], codes, bits)?,
            params,
        },
        loss,
    ))
}
