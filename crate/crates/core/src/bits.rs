//! Bit-width configurations named like `W4A8` or `W4A4KV`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModeKind {
    /// Weights and every activation site are quantized.
    WeightsActivations,
    /// Weights and only the key/value cache are quantized.
    KvOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitConfig {
    pub weight_bits: u8,
    /// 16 in KV-only modes, where activations stay in half precision.
    pub activation_bits: u8,
    pub kv_bits: u8,
    pub kind: ModeKind,
    /// Floor on the bit width of layer-norm and softmax outputs.
    pub ln_softmax_out_bits: u8,
}

pub const FULL_PRECISION_BITS: u8 = 16;

impl BitConfig {
    pub fn weights_activations(weight_bits: u8, activation_bits: u8) -> Result<Self> {
        let c = Self {
            weight_bits,
            activation_bits,
            kv_bits: activation_bits,
            kind: ModeKind::WeightsActivations,
            ln_softmax_out_bits: 8,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn kv_only(weight_bits: u8, kv_bits: u8) -> Result<Self> {
        let c = Self {
            weight_bits,
            activation_bits: FULL_PRECISION_BITS,
            kv_bits,
            kind: ModeKind::KvOnly,
            ln_softmax_out_bits: 8,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for (what, b) in [
            ("weight", self.weight_bits),
            ("activation", self.activation_bits),
            ("kv", self.kv_bits),
            ("ln/softmax", self.ln_softmax_out_bits),
        ] {
            if !(2..=16).contains(&b) {
                return Err(Error::InvalidConfig(format!("{what} bits {b} outside [2, 16]")));
            }
        }
        Ok(())
    }

    pub fn quantizes_activations(&self) -> bool {
        self.kind == ModeKind::WeightsActivations
    }

    /// Bits for layer-norm and softmax outputs: never below the configured floor.
    pub fn ln_softmax_bits(&self) -> u8 {
        self.activation_bits.max(self.ln_softmax_out_bits)
    }

    pub fn tag(&self) -> String {
        match self.kind {
            ModeKind::WeightsActivations => format!("W{}A{}", self.weight_bits, self.activation_bits),
            ModeKind::KvOnly => format!("W{}A{}KV", self.weight_bits, self.kv_bits),
        }
    }
}

impl fmt::Display for BitConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

impl FromStr for BitConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("unrecognised mode {s:?}; expected WxAy or WxAyKV"));
        let upper = s.trim().to_ascii_uppercase();
        let (body, kv) = match upper.strip_suffix("KV") {
            Some(b) => (b, true),
            None => (upper.as_str(), false),
        };
        let rest = body.strip_prefix('W').ok_or_else(bad)?;
        let (w, a) = rest.split_once('A').ok_or_else(bad)?;
        let w: u8 = w.parse().map_err(|_| bad())?;
        let a: u8 = a.parse().map_err(|_| bad())?;
        if kv {
            Self::kv_only(w, a)
        } else {
            Self::weights_activations(w, a)
        }
    }
}
