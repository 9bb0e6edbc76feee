//! Uniform asymmetric quantization.
//!
//! `q = clamp(round(x / s) + z, -2^(k-1), 2^(k-1) - 1)` and `x_hat = s (q - z)`,
//! with Min-Max parameters `s = (max - min) / 2^k`, `z = -round((max + min) / 2s)`.
//! Every `round` is round-half-to-even.
//!
//! Because the scale divides by `2^k` while the code range holds only `2^k - 1`
//! steps, values near the top of the calibrated range can land one code past
//! `2^(k-1) - 1` before clamping. The worst-case in-range reconstruction error
//! is therefore `1.5 s`, reached at `x = max` when `(max + min) / 2s` has a
//! fractional part of one half.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{qmax, qmin};

/// Smallest scale Min-Max will emit; constant channels would otherwise divide by zero.
pub const SCALE_FLOOR: f32 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
    pub bits: u8,
}

impl QuantParams {
    pub fn new(scale: f32, zero_point: i32, bits: u8) -> Result<Self> {
        let p = Self {
            scale,
            zero_point,
            bits,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::InvalidParams(format!("scale {} must be positive", self.scale)));
        }
        if !(2..=16).contains(&self.bits) {
            return Err(Error::InvalidParams(format!("bit width {} outside [2, 16]", self.bits)));
        }
        Ok(())
    }

    pub fn qmin(&self) -> i32 {
        qmin(self.bits)
    }

    pub fn qmax(&self) -> i32 {
        qmax(self.bits)
    }

    #[inline]
    pub fn quantize(&self, x: f32) -> i32 {
        quantize(x, self)
    }

    #[inline]
    pub fn dequantize(&self, q: i32) -> f32 {
        dequantize(q, self)
    }

    /// Quantize then dequantize.
    #[inline]
    pub fn fake_quant(&self, x: f32) -> f32 {
        dequantize(quantize(x, self), self)
    }
}

#[inline]
pub fn quantize(x: f32, p: &QuantParams) -> i32 {
    // float -> int casts saturate, so huge ratios still clamp correctly
    let r = (x / p.scale).round_ties_even() as i64;
    let v = r.saturating_add(p.zero_point as i64);
    v.clamp(p.qmin() as i64, p.qmax() as i64) as i32
}

#[inline]
pub fn dequantize(q: i32, p: &QuantParams) -> f32 {
    p.scale * (q as i64 - p.zero_point as i64) as f32
}

pub fn minmax_params(xmin: f32, xmax: f32, bits: u8) -> Result<QuantParams> {
    if !(xmin <= xmax) {
        return Err(Error::InvalidRange {
            min: xmin as f64,
            max: xmax as f64,
        });
    }
    if !(2..=16).contains(&bits) {
        return Err(Error::InvalidParams(format!("bit width {bits} outside [2, 16]")));
    }
    let levels = (1u32 << bits) as f64;
    let scale = (((xmax as f64) - (xmin as f64)) / levels) as f32;
    let scale = if scale.is_finite() { scale.max(SCALE_FLOOR) } else { f32::MAX };
    let mid = ((xmax as f64) + (xmin as f64)) / (2.0 * scale as f64);
    let z = -mid.round_ties_even();
    let zero_point = z.clamp(i32::MIN as f64, i32::MAX as f64) as i32;
    QuantParams::new(scale, zero_point, bits)
}
