//! Analytical inference memory model: weights, key/value cache and the
//! transient activations of one forward pass.
//!
//! ```text
//! weight  = P * w_bits / 8
//! kv      = 2 * L * B * S * d * kv_bits / 8
//! dynamic = B * S * d * c_dyn(mode) * act_bits / 8
//! ```
//!
//! `c_dyn` is a per-mode constant fitted once against published totals and
//! shipped in `data/dynamic_calibration.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bits::{BitConfig, ModeKind};
use crate::error::{Error, Result};

const SHAPES_JSON: &str = include_str!("../data/opt_shapes.json");
const CALIBRATION_JSON: &str = include_str!("../data/dynamic_calibration.json");
const GOLDEN_CSV: &str = include_str!("../data/memory_golden.csv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ByteUnit {
    /// 2^30 bytes.
    GiB,
    /// 10^9 bytes.
    GB,
}

impl ByteUnit {
    pub fn bytes(self) -> f64 {
        match self {
            ByteUnit::GiB => (1u64 << 30) as f64,
            ByteUnit::GB => 1e9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub name: String,
    pub params: f64,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_positions: usize,
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        if !(self.params > 0.0) || self.layers == 0 || self.hidden == 0 || self.heads == 0 {
            return Err(Error::InvalidConfig(format!("model {}: sizes must be positive", self.name)));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "model {}: hidden {} not divisible by {} heads",
                self.name, self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

pub fn load_shapes(json: &str) -> Result<Vec<ModelShape>> {
    let shapes: Vec<ModelShape> = serde_json::from_str(json)?;
    for s in &shapes {
        s.validate()?;
    }
    Ok(shapes)
}

pub fn builtin_shapes() -> Vec<ModelShape> {
    load_shapes(SHAPES_JSON).expect("bundled shapes parse")
}

pub fn find_shape<'a>(shapes: &'a [ModelShape], name: &str) -> Result<&'a ModelShape> {
    shapes
        .iter()
        .find(|s| s.name.eq_ignore_ascii_case(name))
        .ok_or_else(|| Error::InvalidConfig(format!("unknown model {name}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicCalibration {
    pub unit: ByteUnit,
    /// Used for modes missing from `c_dyn`.
    pub default_c_dyn: f64,
    pub c_dyn: BTreeMap<String, f64>,
}

impl DynamicCalibration {
    pub fn builtin() -> Self {
        serde_json::from_str(CALIBRATION_JSON).expect("bundled calibration parses")
    }

    /// The fitted constant for `cfg`'s tag. Other modes interpolate between
    /// fitted modes of the same kind along the quantized activation width
    /// (activation bits, or KV bits for KV-only modes), which keeps totals
    /// monotone in every bit width. `default_c_dyn` applies only when no mode
    /// of that kind was fitted.
    pub fn c_dyn(&self, cfg: &BitConfig) -> f64 {
        if let Some(&c) = self.c_dyn.get(&cfg.tag()) {
            return c;
        }
        let key = |c: &BitConfig| match c.kind {
            ModeKind::WeightsActivations => c.activation_bits,
            ModeKind::KvOnly => c.kv_bits,
        } as f64;
        let mut pts: Vec<(f64, f64)> = self
            .c_dyn
            .iter()
            .filter_map(|(tag, &c)| tag.parse::<BitConfig>().ok().map(|b| (b, c)))
            .filter(|(b, _)| b.kind == cfg.kind)
            .map(|(b, c)| (key(&b), c))
            .collect();
        if pts.is_empty() {
            return self.default_c_dyn;
        }
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        pts.dedup_by(|a, b| a.0 == b.0);
        let y = key(cfg);
        // activation modes interpolate c * bits, KV modes interpolate c itself
        let scaled = cfg.kind == ModeKind::WeightsActivations;
        let f = |(k, c): (f64, f64)| if scaled { c * k } else { c };
        let (first, last) = (pts[0], pts[pts.len() - 1]);
        if y <= first.0 {
            return first.1;
        }
        if y >= last.0 {
            return last.1;
        }
        let i = pts.iter().position(|p| p.0 >= y).unwrap();
        let (a, b) = (pts[i - 1], pts[i]);
        let t = (y - a.0) / (b.0 - a.0);
        let v = f(a) + t * (f(b) - f(a));
        if scaled {
            v / y
        } else {
            v
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub weight_bytes: f64,
    pub kv_bytes: f64,
    pub dynamic_bytes: f64,
    pub total_bytes: f64,
}

impl MemoryEstimate {
    /// Weight, KV and dynamic shares of the total.
    pub fn fractions(&self) -> [f64; 3] {
        [
            self.weight_bytes / self.total_bytes,
            self.kv_bytes / self.total_bytes,
            self.dynamic_bytes / self.total_bytes,
        ]
    }

    pub fn total_in(&self, unit: ByteUnit) -> f64 {
        self.total_bytes / unit.bytes()
    }
}

pub fn estimate(shape: &ModelShape, cfg: &BitConfig, batch: usize, seqlen: usize, calib: &DynamicCalibration) -> MemoryEstimate {
    let tokens = batch as f64 * seqlen as f64;
    let d = shape.hidden as f64;
    let weight_bytes = shape.params * cfg.weight_bits as f64 / 8.0;
    let kv_bytes = 2.0 * shape.layers as f64 * tokens * d * cfg.kv_bits as f64 / 8.0;
    let dynamic_bytes = tokens * d * calib.c_dyn(cfg) * cfg.activation_bits as f64 / 8.0;
    MemoryEstimate {
        weight_bytes,
        kv_bytes,
        dynamic_bytes,
        total_bytes: weight_bytes + kv_bytes + dynamic_bytes,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: String,
    pub mode: String,
    pub batch: usize,
    pub seqlen: usize,
    pub estimate: MemoryEstimate,
}

/// Cross product of shapes, modes, batch sizes and sequence lengths, in that nesting order.
pub fn sweep(
    shapes: &[ModelShape],
    cfgs: &[BitConfig],
    batches: &[usize],
    seqlens: &[usize],
    calib: &DynamicCalibration,
) -> Result<Vec<SweepRow>> {
    if shapes.is_empty() || cfgs.is_empty() || batches.is_empty() || seqlens.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one model, mode, batch size and sequence length".into()));
    }
    if batches.contains(&0) || seqlens.contains(&0) {
        return Err(Error::InvalidConfig("batch sizes and sequence lengths must be positive".into()));
    }
    let mut rows = Vec::with_capacity(shapes.len() * cfgs.len() * batches.len() * seqlens.len());
    for shape in shapes {
        for cfg in cfgs {
            for &b in batches {
                for &s in seqlens {
                    rows.push(SweepRow {
                        model: shape.name.clone(),
                        mode: cfg.tag(),
                        batch: b,
                        seqlen: s,
                        estimate: estimate(shape, cfg, b, s, calib),
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Component sizes in `unit`; `proportions` appends each component's share of the total.
pub fn sweep_csv(rows: &[SweepRow], unit: ByteUnit, proportions: bool) -> String {
    let mut out = String::from("model,mode,batch,seqlen,weight_GB,kv_GB,dynamic_GB,total_GB");
    out.push_str(if proportions { ",weight_frac,kv_frac,dynamic_frac\n" } else { "\n" });
    let u = unit.bytes();
    for r in rows {
        let e = &r.estimate;
        let _ = write!(
            out,
            "{},{},{},{},{:.4},{:.4},{:.4},{:.4}",
            r.model,
            r.mode,
            r.batch,
            r.seqlen,
            e.weight_bytes / u,
            e.kv_bytes / u,
            e.dynamic_bytes / u,
            e.total_bytes / u,
        );
        if proportions {
            let [fw, fk, fd] = e.fractions();
            let _ = write!(out, ",{fw:.6},{fk:.6},{fd:.6}");
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenCell {
    pub model: String,
    pub mode: String,
    pub batch: usize,
    pub seqlen: usize,
    pub total_gb: f64,
}

pub fn parse_golden(csv: &str) -> Result<Vec<GoldenCell>> {
    let mut cells = Vec::new();
    for (i, line) in csv.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || Error::InvalidConfig(format!("golden file line {}: {line:?}", i + 1));
        if f.len() != 5 {
            return Err(bad());
        }
        cells.push(GoldenCell {
            model: f[0].to_string(),
            mode: f[1].to_string(),
            batch: f[2].parse().map_err(|_| bad())?,
            seqlen: f[3].parse().map_err(|_| bad())?,
            total_gb: f[4].parse().map_err(|_| bad())?,
        });
    }
    Ok(cells)
}

/// Published totals for the 30b, 66b and 175b models.
pub fn memory_golden() -> Vec<GoldenCell> {
    parse_golden(GOLDEN_CSV).expect("bundled golden file parses")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenComparison {
    pub cell: GoldenCell,
    pub estimate_gb: f64,
    pub rel_err: f64,
}

pub fn compare_golden(shapes: &[ModelShape], cells: &[GoldenCell], calib: &DynamicCalibration) -> Result<Vec<GoldenComparison>> {
    cells
        .iter()
        .map(|c| {
            let shape = find_shape(shapes, &c.model)?;
            let cfg: BitConfig = c.mode.parse()?;
            let est = estimate(shape, &cfg, c.batch, c.seqlen, calib).total_in(calib.unit);
            Ok(GoldenComparison {
                cell: c.clone(),
                estimate_gb: est,
                rel_err: (est - c.total_gb).abs() / c.total_gb,
            })
        })
        .collect()
}

pub fn golden_csv(rows: &[GoldenComparison]) -> String {
    let mut out = String::from("model,mode,batch,seqlen,published_GB,estimate_GB,rel_err\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{:.2},{:.4}",
            r.cell.model, r.cell.mode, r.cell.batch, r.cell.seqlen, r.cell.total_gb, r.estimate_gb, r.rel_err
        );
    }
    out
}
