//! Asymmetric weight-only post-training quantization, one set of
//! coefficients per tensor.
//!
//! ```text
//! s   = (r_max - r_min) / (2^n - 1)
//! z   = clamp(floor(q_max - r_max / s), 0, 2^n - 1)
//! w_q = clamp(floor(w_f / s) + z, 0, 2^n - 1)
//! w_d = s * (w_q - z)
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseTensor;

pub const DEFAULT_BITS: u8 = 8;
pub const MAX_BITS: u8 = 16;

/// Rounding applied to `w_f / s` before the zero-point shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rounding {
    #[default]
    Floor,
    Nearest,
}

impl fmt::Display for Rounding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rounding::Floor => "floor",
            Rounding::Nearest => "nearest",
        })
    }
}

impl FromStr for Rounding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "floor" => Ok(Rounding::Floor),
            "nearest" => Ok(Rounding::Nearest),
            other => Err(Error::config(format!(
                "unknown rounding mode `{other}` (expected floor|nearest)"
            ))),
        }
    }
}

/// Scale, zero-point and range for one weight tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
    pub bits: u8,
    pub r_min: f64,
    pub r_max: f64,
    #[serde(default)]
    pub rounding: Rounding,
}

impl QuantParams {
    pub fn q_min(&self) -> i64 {
        0
    }

    pub fn q_max(&self) -> i64 {
        (1_i64 << self.bits) - 1
    }

    fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::config(format!("scale must be positive, got {}", self.scale)));
        }
        if i64::from(self.zero_point) < self.q_min() || i64::from(self.zero_point) > self.q_max() {
            return Err(Error::config(format!(
                "zero point {} outside [0, {}]",
                self.zero_point,
                self.q_max()
            )));
        }
        if !(self.r_min <= self.r_max) {
            return Err(Error::config("r_min exceeds r_max"));
        }
        Ok(())
    }

    /// Integer grid position of `w` before the zero-point shift and clamp.
    ///
    /// With floor rounding this is the largest `m` with `s * m <= w` in
    /// floating point, which keeps unclamped residuals in `[0, s)` exactly.
    pub fn grid_index(&self, w: f64) -> i64 {
        let s = self.scale;
        match self.rounding {
            Rounding::Floor => {
                let mut m = (w / s).floor();
                while m * s > w {
                    m -= 1.0;
                }
                while (m + 1.0) * s <= w {
                    m += 1.0;
                }
                m as i64
            }
            Rounding::Nearest => (w / s).round() as i64,
        }
    }

    /// Code before clamping to `[0, 2^n - 1]`.
    pub fn unclamped_code(&self, w: f64) -> i64 {
        self.grid_index(w) + i64::from(self.zero_point)
    }

    pub fn code(&self, w: f64) -> u32 {
        self.unclamped_code(w).clamp(self.q_min(), self.q_max()) as u32
    }

    pub fn dequantize_code(&self, code: u32) -> f64 {
        self.scale * (i64::from(code) - i64::from(self.zero_point)) as f64
    }
}

fn check_bits(bits: u8) -> Result<()> {
    if !(2..=MAX_BITS).contains(&bits) {
        return Err(Error::config(format!("bitwidth must be in 2..={MAX_BITS}, got {bits}")));
    }
    Ok(())
}

/// Codes stored at the smallest machine width holding `n` bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Codes {
    U8(Vec<u8>),
    U16(Vec<u16>),
}

impl Codes {
    fn with_bits(bits: u8, codes: impl Iterator<Item = u32>) -> Self {
        if bits <= 8 {
            Codes::U8(codes.map(|c| c as u8).collect())
        } else {
            Codes::U16(codes.map(|c| c as u16).collect())
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Codes::U8(v) => v.len(),
            Codes::U16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> u32 {
        match self {
            Codes::U8(v) => u32::from(v[i]),
            Codes::U16(v) => u32::from(v[i]),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    pub fn to_vec(&self) -> Vec<u32> {
        self.iter().collect()
    }
}

/// Integer codes plus the coefficients needed to dequantize them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    params: QuantParams,
    codes: Codes,
}

impl QuantizedTensor {
    pub fn from_parts(shape: Vec<usize>, params: QuantParams, codes: Vec<u32>) -> Result<Self> {
        params.validate()?;
        let n: usize = shape.iter().product();
        if n != codes.len() {
            return Err(Error::dim("quantized tensor", &shape, &[codes.len()]));
        }
        if let Some(&bad) = codes.iter().find(|&&c| i64::from(c) > params.q_max()) {
            return Err(Error::Format(format!(
                "code {bad} exceeds {}-bit range",
                params.bits
            )));
        }
        Ok(Self {
            shape,
            params,
            codes: Codes::with_bits(params.bits, codes.into_iter()),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }

    pub fn codes(&self) -> &Codes {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

fn check_weights(weights: &DenseTensor) -> Result<(f64, f64)> {
    if weights.is_empty() {
        return Err(Error::config("cannot calibrate an empty tensor"));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (i, &w) in weights.data().iter().enumerate() {
        if !w.is_finite() {
            return Err(Error::numeric(format!("weight {i} is {w}")));
        }
        lo = lo.min(w);
        hi = hi.max(w);
    }
    Ok((lo, hi))
}

/// Min/max calibration with floor rounding.
pub fn calibrate(weights: &DenseTensor, bits: u8) -> Result<QuantParams> {
    calibrate_with(weights, bits, Rounding::Floor)
}

/// Min/max calibration. The observed range is widened to contain 0 so the
/// zero point never clamps; a one-signed range such as `[-90, -87]` would
/// otherwise put every weight outside the representable grid.
pub fn calibrate_with(weights: &DenseTensor, bits: u8, rounding: Rounding) -> Result<QuantParams> {
    check_bits(bits)?;
    let (lo, hi) = check_weights(weights)?;
    let (r_min, r_max) = (lo.min(0.0), hi.max(0.0));
    let q_max = ((1_i64 << bits) - 1) as f64;
    let round = |v: f64| match rounding {
        Rounding::Floor => v.floor(),
        Rounding::Nearest => v.round(),
    };
    let (scale, zero) = if r_max == r_min {
        // All-zero tensor: unit scale keeps the zero-point formula intact.
        (1.0, round(q_max - r_max))
    } else {
        let scale = (r_max - r_min) / q_max;
        // r_max / s evaluated as q_max * r_max / (r_max - r_min) to avoid
        // compounding the rounding of s into the zero point.
        let ratio = q_max * r_max / (r_max - r_min);
        (scale, round(q_max - ratio))
    };
    Ok(QuantParams {
        scale,
        zero_point: zero.clamp(0.0, q_max) as i32,
        bits,
        r_min,
        r_max,
        rounding,
    })
}

pub fn quantize(weights: &DenseTensor, params: &QuantParams) -> Result<QuantizedTensor> {
    params.validate()?;
    if let Some(i) = weights.data().iter().position(|w| !w.is_finite()) {
        return Err(Error::numeric(format!("weight {i} is not finite")));
    }
    let codes = Codes::with_bits(params.bits, weights.data().iter().map(|&w| params.code(w)));
    Ok(QuantizedTensor {
        shape: weights.shape().to_vec(),
        params: *params,
        codes,
    })
}

/// Calibrate then quantize.
pub fn quantize_tensor(weights: &DenseTensor, bits: u8, rounding: Rounding) -> Result<QuantizedTensor> {
    let params = calibrate_with(weights, bits, rounding)?;
    quantize(weights, &params)
}

pub fn dequantize(q: &QuantizedTensor) -> DenseTensor {
    let data = q.codes.iter().map(|c| q.params.dequantize_code(c)).collect();
    DenseTensor::new(q.shape.clone(), data).expect("shape checked at construction")
}

/// Mean squared residual between `original` and the dequantized codes.
pub fn quantization_error(original: &DenseTensor, q: &QuantizedTensor) -> Result<f64> {
    Ok(residual_sq_sum(original, q)? / original.len() as f64)
}

/// `Σ (w_f - w_d)²`, for pooling the error over several tensors.
pub fn residual_sq_sum(original: &DenseTensor, q: &QuantizedTensor) -> Result<f64> {
    if original.shape() != q.shape() {
        return Err(Error::dim("quantization_error", original.shape(), q.shape()));
    }
    if original.is_empty() {
        return Err(Error::config("quantization error of an empty tensor"));
    }
    Ok(original
        .data()
        .iter()
        .zip(q.codes.iter())
        .map(|(&w, c)| {
            let r = w - q.params.dequantize_code(c);
            r * r
        })
        .sum())
}

pub fn max_abs_residual(original: &DenseTensor, q: &QuantizedTensor) -> Result<f64> {
    if original.shape() != q.shape() {
        return Err(Error::dim("max_abs_residual", original.shape(), q.shape()));
    }
    Ok(original
        .data()
        .iter()
        .zip(q.codes.iter())
        .map(|(&w, c)| (w - q.params.dequantize_code(c)).abs())
        .fold(0.0, f64::max))
}

// ---------------------------------------------------------------------------
// Binary blob and JSON sidecar
// ---------------------------------------------------------------------------

const BLOB_MAGIC: &[u8; 4] = b"SMQT";
const BLOB_VERSION: u8 = 1;

/// Little-endian layout:
///
/// ```text
/// "SMQT" | version u8 | bits u8 | rounding u8 | ndim u32 | dims u64 * ndim
/// | scale f64 | zero_point i32 | r_min f64 | r_max f64 | count u64
/// | codes bit-packed LSB-first, `bits` bits each, zero-padded to a byte
/// ```
impl QuantizedTensor {
    pub fn to_blob(&self) -> Vec<u8> {
        let p = &self.params;
        let mut out = Vec::with_capacity(64 + self.len() * usize::from(p.bits) / 8);
        out.extend_from_slice(BLOB_MAGIC);
        out.push(BLOB_VERSION);
        out.push(p.bits);
        out.push(match p.rounding {
            Rounding::Floor => 0,
            Rounding::Nearest => 1,
        });
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&p.scale.to_le_bytes());
        out.extend_from_slice(&p.zero_point.to_le_bytes());
        out.extend_from_slice(&p.r_min.to_le_bytes());
        out.extend_from_slice(&p.r_max.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend(pack_bits(self.codes.iter(), p.bits));
        out
    }

    pub fn from_blob(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != BLOB_MAGIC {
            return Err(Error::Format("not a quantized tensor blob".into()));
        }
        let version = r.u8()?;
        if version != BLOB_VERSION {
            return Err(Error::Format(format!("unsupported blob version {version}")));
        }
        let bits = r.u8()?;
        let rounding = match r.u8()? {
            0 => Rounding::Floor,
            1 => Rounding::Nearest,
            other => return Err(Error::Format(format!("unknown rounding tag {other}"))),
        };
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let params = QuantParams {
            scale: r.f64()?,
            zero_point: r.i32()?,
            r_min: r.f64()?,
            r_max: r.f64()?,
            bits,
            rounding,
        };
        let count = r.u64()? as usize;
        let packed = r.take((count * usize::from(bits)).div_ceil(8))?;
        if !r.is_done() {
            return Err(Error::Format("trailing bytes after codes".into()));
        }
        let codes = unpack_bits(packed, bits, count);
        Self::from_parts(shape, params, codes).map_err(|e| match e {
            Error::Config(m) => Error::Format(m),
            other => other,
        })
    }

    pub fn to_sidecar(&self) -> QuantSidecar {
        QuantSidecar {
            shape: self.shape.clone(),
            params: self.params,
            codes: self.codes.to_vec(),
        }
    }
}

/// JSON mirror of a blob, for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSidecar {
    pub shape: Vec<usize>,
    pub params: QuantParams,
    pub codes: Vec<u32>,
}

impl QuantSidecar {
    pub fn into_tensor(self) -> Result<QuantizedTensor> {
        QuantizedTensor::from_parts(self.shape, self.params, self.codes)
    }
}

fn pack_bits(codes: impl Iterator<Item = u32>, bits: u8) -> Vec<u8> {
    let mut out = Vec::new();
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    for c in codes {
        acc |= u64::from(c) << filled;
        filled += u32::from(bits);
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
    out
}

fn unpack_bits(bytes: &[u8], bits: u8, count: usize) -> Vec<u32> {
    let mask = (1u64 << bits) - 1;
    let mut out = Vec::with_capacity(count);
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    let mut it = bytes.iter();
    for _ in 0..count {
        while filled < u32::from(bits) {
            acc |= u64::from(*it.next().unwrap_or(&0)) << filled;
            filled += 8;
        }
        out.push((acc & mask) as u32);
        acc >>= bits;
        filled -= u32::from(bits);
    }
    out
}

pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("unexpected end of data".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
