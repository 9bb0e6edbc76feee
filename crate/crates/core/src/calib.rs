//! Per-channel extrema collected over a calibration set.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Running per-channel min/max. An empty accumulator holds `+inf`/`-inf`,
/// which serialize as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub channels: usize,
    #[serde(serialize_with = "ser_extrema", deserialize_with = "de_mins")]
    pub mins: Vec<f32>,
    #[serde(serialize_with = "ser_extrema", deserialize_with = "de_maxs")]
    pub maxs: Vec<f32>,
    pub samples_seen: u64,
}

fn ser_extrema<S: Serializer>(v: &[f32], s: S) -> std::result::Result<S::Ok, S::Error> {
    let opt: Vec<Option<f32>> = v.iter().map(|x| x.is_finite().then_some(*x)).collect();
    opt.serialize(s)
}

fn de_mins<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f32>, D::Error> {
    let v: Vec<Option<f32>> = Vec::deserialize(d)?;
    Ok(v.into_iter().map(|x| x.unwrap_or(f32::INFINITY)).collect())
}

fn de_maxs<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f32>, D::Error> {
    let v: Vec<Option<f32>> = Vec::deserialize(d)?;
    Ok(v.into_iter().map(|x| x.unwrap_or(f32::NEG_INFINITY)).collect())
}

impl ChannelStats {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            mins: vec![f32::INFINITY; channels],
            maxs: vec![f32::NEG_INFINITY; channels],
            samples_seen: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.samples_seen == 0
    }

    /// Folds a batch into the running extrema. The leading axis counts as samples.
    pub fn collect(&mut self, batch: &Tensor) -> Result<()> {
        if batch.last_dim() != self.channels {
            return Err(Error::ChannelMismatch {
                expected: self.channels,
                got: batch.last_dim(),
            });
        }
        for row in batch.row_iter() {
            for ((lo, hi), &v) in self.mins.iter_mut().zip(self.maxs.iter_mut()).zip(row) {
                *lo = lo.min(v);
                *hi = hi.max(v);
            }
        }
        self.samples_seen += if batch.shape().len() >= 2 {
            batch.shape()[0] as u64
        } else {
            1
        };
        Ok(())
    }

    pub fn merge(&self, other: &ChannelStats) -> Result<ChannelStats> {
        if self.channels != other.channels {
            return Err(Error::ChannelMismatch {
                expected: self.channels,
                got: other.channels,
            });
        }
        Ok(ChannelStats {
            channels: self.channels,
            mins: self.mins.iter().zip(&other.mins).map(|(a, b)| a.min(*b)).collect(),
            maxs: self.maxs.iter().zip(&other.maxs).map(|(a, b)| a.max(*b)).collect(),
            samples_seen: self.samples_seen + other.samples_seen,
        })
    }

    /// Stats in reordered channel order: `out[i] = self[perm[i]]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<ChannelStats> {
        crate::tensor::validate_permutation(perm, self.channels)?;
        Ok(ChannelStats {
            channels: self.channels,
            mins: perm.iter().map(|&p| self.mins[p]).collect(),
            maxs: perm.iter().map(|&p| self.maxs[p]).collect(),
            samples_seen: self.samples_seen,
        })
    }

    /// Channels `[start, start + len)` as their own stats object.
    pub fn slice(&self, start: usize, len: usize) -> ChannelStats {
        ChannelStats {
            channels: len,
            mins: self.mins[start..start + len].to_vec(),
            maxs: self.maxs[start..start + len].to_vec(),
            samples_seen: self.samples_seen,
        }
    }

    /// Overall extrema across all channels.
    pub fn tensor_range(&self) -> (f32, f32) {
        let lo = self.mins.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = self.maxs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        (lo, hi)
    }

    /// `(min, max)` points used as clustering signatures.
    pub fn range_signatures(&self) -> Vec<Vec<f64>> {
        self.mins
            .iter()
            .zip(&self.maxs)
            .map(|(&lo, &hi)| vec![lo as f64, hi as f64])
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("channel,min,max\n");
        for (i, (lo, hi)) in self.mins.iter().zip(&self.maxs).enumerate() {
            s.push_str(&format!("{i},{lo},{hi}\n"));
        }
        s
    }
}

/// Per-channel Q and K extrema of one attention head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadQKStats {
    pub q_max: Vec<f32>,
    pub q_min: Vec<f32>,
    pub k_max: Vec<f32>,
    pub k_min: Vec<f32>,
}

impl HeadQKStats {
    /// `(q_max, q_min, k_max, k_min)` per channel.
    pub fn quaternion_points(&self) -> Vec<Vec<f64>> {
        (0..self.q_max.len())
            .map(|i| {
                vec![
                    self.q_max[i] as f64,
                    self.q_min[i] as f64,
                    self.k_max[i] as f64,
                    self.k_min[i] as f64,
                ]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QKJointStats {
    pub heads: Vec<HeadQKStats>,
}

impl QKJointStats {
    /// From `q`, `k` laid out as `[B, H, N, head_dim]`.
    pub fn collect(q: &Tensor, k: &Tensor) -> Result<QKJointStats> {
        if q.shape() != k.shape() {
            return Err(Error::ShapeMismatch(format!(
                "q {:?} vs k {:?}",
                q.shape(),
                k.shape()
            )));
        }
        if q.shape().len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "expected [B, H, N, head_dim], got {:?}",
                q.shape()
            )));
        }
        let (b, h, n, hd) = (q.shape()[0], q.shape()[1], q.shape()[2], q.shape()[3]);
        let mut heads = Vec::with_capacity(h);
        for head in 0..h {
            let mut qs = ChannelStats::new(hd);
            let mut ks = ChannelStats::new(hd);
            for bi in 0..b {
                let off = (bi * h + head) * n * hd;
                let qt = Tensor::new(vec![n, hd], q.data()[off..off + n * hd].to_vec())?;
                let kt = Tensor::new(vec![n, hd], k.data()[off..off + n * hd].to_vec())?;
                qs.collect(&qt)?;
                ks.collect(&kt)?;
            }
            heads.push(HeadQKStats {
                q_max: qs.maxs,
                q_min: qs.mins,
                k_max: ks.maxs,
                k_min: ks.mins,
            });
        }
        Ok(QKJointStats { heads })
    }

    /// Splits full-width Q and K channel stats (heads contiguous) into per-head tuples.
    pub fn from_channel_stats(q: &ChannelStats, k: &ChannelStats, heads: usize) -> Result<Self> {
        if q.channels != k.channels {
            return Err(Error::ChannelMismatch {
                expected: q.channels,
                got: k.channels,
            });
        }
        if heads == 0 || q.channels % heads != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} channels not divisible into {heads} heads",
                q.channels
            )));
        }
        let hd = q.channels / heads;
        Ok(QKJointStats {
            heads: (0..heads)
                .map(|h| {
                    let r = h * hd..(h + 1) * hd;
                    HeadQKStats {
                        q_max: q.maxs[r.clone()].to_vec(),
                        q_min: q.mins[r.clone()].to_vec(),
                        k_max: k.maxs[r.clone()].to_vec(),
                        k_min: k.mins[r].to_vec(),
                    }
                })
                .collect(),
        })
    }
}
