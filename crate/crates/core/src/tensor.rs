//! Dense row-major tensors and the `RPTQTNSR` binary file format.
//!
//! Activations use the axis convention `[sample, token, channel]` and weights
//! `[out, in]`. The channel axis is always the last one, so most kernels in
//! this crate walk a tensor as a sequence of last-axis rows.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "RPTQTNSR"
//! version  u32      1
//! dtype    u32      0 = f32, 1 = i32
//! ndim     u32
//! dims     ndim x u64
//! payload  product(dims) x 4 bytes
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RPTQTNSR";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u32 = 0;
pub const DTYPE_I32: u32 = 1;

/// Dense 32-bit float tensor. Immutable once built; every value is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

/// Quantized codes held in 32-bit containers, each within the signed `bits`-bit range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntTensor {
    shape: Vec<usize>,
    data: Vec<i32>,
    bits: u8,
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::ShapeMismatch("tensor must have at least one axis".into()));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::ZeroAxis(shape.to_vec()));
    }
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::ShapeMismatch(format!(
            "shape {shape:?} holds {numel} elements but data has {len}"
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f32) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, (0..n).map(&mut f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Length of the channel (last) axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Number of last-axis rows, i.e. the product of all leading axes.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_iter(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.last_dim())
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape, self.data.len())?;
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    /// `out[..., i] = self[..., perm[i]]`.
    pub fn permute_last_axis(&self, perm: &[usize]) -> Result<Self> {
        validate_permutation(perm, self.last_dim())?;
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.row_iter() {
            data.extend(perm.iter().map(|&p| row[p]));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = header_bytes(DTYPE_F32, &self.shape);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (shape, payload) = parse_header(bytes, DTYPE_F32)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(shape, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn qmin(bits: u8) -> i32 {
    -(1i32 << (bits - 1))
}

pub fn qmax(bits: u8) -> i32 {
    (1i32 << (bits - 1)) - 1
}

impl IntTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i32>, bits: u8) -> Result<Self> {
        if !(2..=16).contains(&bits) {
            return Err(Error::InvalidParams(format!("bit width {bits} outside [2, 16]")));
        }
        check_shape(&shape, data.len())?;
        let (lo, hi) = (qmin(bits), qmax(bits));
        if let Some(i) = data.iter().position(|&v| v < lo || v > hi) {
            return Err(Error::InvalidParams(format!(
                "code {} at index {i} outside [{lo}, {hi}] for {bits} bits",
                data[i]
            )));
        }
        Ok(Self { shape, data, bits })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn row(&self, i: usize) -> &[i32] {
        let c = self.last_dim();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = header_bytes(DTYPE_I32, &self.shape);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// The file format does not carry the logical bit width, so the caller supplies it.
    pub fn from_bytes(bytes: &[u8], bits: u8) -> Result<Self> {
        let (shape, payload) = parse_header(bytes, DTYPE_I32)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(shape, data, bits)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, bits: u8) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, bits)
    }
}

fn header_bytes(dtype: u32, shape: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 8 * shape.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dtype.to_le_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::TruncatedPayload {
                expected: self.pos.saturating_add(n),
                found: self.bytes.len(),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

fn parse_header(bytes: &[u8], want_dtype: u32) -> Result<(Vec<usize>, &[u8])> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).map_err(|_| Error::BadMagic)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dtype = r.u32()?;
    if dtype != DTYPE_F32 && dtype != DTYPE_I32 {
        return Err(Error::UnsupportedDtype(dtype));
    }
    if dtype != want_dtype {
        return Err(Error::ShapeMismatch(format!(
            "file holds dtype {dtype}, expected {want_dtype}"
        )));
    }
    let ndim = r.u32()? as usize;
    let mut shape = Vec::with_capacity(ndim.min(16));
    for _ in 0..ndim {
        let d = usize::try_from(r.u64()?)
            .map_err(|_| Error::ShapeMismatch("axis length exceeds address space".into()))?;
        shape.push(d);
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::ZeroAxis(shape));
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::ShapeMismatch(format!("shape {shape:?} overflows")))?;
    let payload_len = numel
        .checked_mul(4)
        .ok_or_else(|| Error::ShapeMismatch(format!("shape {shape:?} overflows")))?;
    let rest = &bytes[r.pos..];
    if rest.len() < payload_len {
        return Err(Error::TruncatedPayload {
            expected: payload_len,
            found: rest.len(),
        });
    }
    if rest.len() > payload_len {
        return Err(Error::ShapeMismatch(format!(
            "payload holds {} bytes but shape {shape:?} declares {payload_len}",
            rest.len()
        )));
    }
    Ok((shape, rest))
}

pub fn validate_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::InvalidPermutation(format!(
            "length {} does not match axis length {n}",
            perm.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || std::mem::replace(&mut seen[p], true) {
            return Err(Error::InvalidPermutation(format!(
                "index {p} out of range or repeated"
            )));
        }
    }
    Ok(())
}

pub fn invert_permutation(perm: &[usize]) -> Result<Vec<usize>> {
    validate_permutation(perm, perm.len())?;
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    Ok(inv)
}

/// `y = x W^T + bias` for `x: [..., in]`, `w: [out, in]`, accumulated in f64.
pub fn linear(x: &Tensor, w: &Tensor, bias: Option<&[f32]>) -> Result<Tensor> {
    if w.shape().len() != 2 {
        return Err(Error::ShapeMismatch(format!("weight must be 2-D, got {:?}", w.shape())));
    }
    let (c2, c1) = (w.shape()[0], w.shape()[1]);
    if x.last_dim() != c1 {
        return Err(Error::ChannelMismatch {
            expected: c1,
            got: x.last_dim(),
        });
    }
    if let Some(b) = bias {
        if b.len() != c2 {
            return Err(Error::ShapeMismatch(format!("bias length {} != {c2}", b.len())));
        }
    }
    let mut out = Vec::with_capacity(x.rows() * c2);
    for xr in x.row_iter() {
        for o in 0..c2 {
            let wr = w.row(o);
            let mut acc = 0.0f64;
            for (a, b) in xr.iter().zip(wr) {
                acc += *a as f64 * *b as f64;
            }
            if let Some(b) = bias {
                acc += b[o] as f64;
            }
            out.push(acc as f32);
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = c2;
    Tensor::new(shape, out)
}

/// `max|a - b| / max|b|`, the relative error measure used throughout the crate.
pub fn relative_error(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num = a
        .iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((*x as f64 - *y as f64).abs()));
    let den = b.iter().fold(0.0f64, |m, y| m.max((*y as f64).abs()));
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

pub fn mse(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64
}
