//! Float and int8 CHW tensors plus the quantization arithmetic shared by every
//! int8 kernel.
//!
//! Activations use asymmetric per-tensor parameters, weights use symmetric
//! per-output-channel scales. `quantize` rounds half away from zero; the
//! integer-only [`requantize`] rounds half to even so that results are
//! reproducible bit for bit on every platform.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Channel-major tensor extent (`C x H x W`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl TensorShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidShape(format!(
                "{channels}x{height}x{width} has a zero dimension"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
        })
    }

    pub const fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    pub const fn with_channels(self, channels: usize) -> Self {
        Self { channels, ..self }
    }
}

impl std::fmt::Display for TensorShape {
    /// Formats as `HxWxC`, the order used in the layer tables.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.channels)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloatTensor {
    shape: TensorShape,
    data: Vec<f32>,
}

impl FloatTensor {
    pub fn new(shape: TensorShape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::InvalidShape(format!(
                "{} elements for shape {shape}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidShape(format!(
                "non-finite value {} at element {i}",
                data[i]
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: TensorShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub(crate) fn from_raw(shape: TensorShape, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        Self { shape, data }
    }

    pub fn shape(&self) -> TensorShape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.shape.plane();
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.shape.height + y) * self.shape.width + x]
    }

    /// Returns `(min, max)` over all elements.
    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    Symmetric,
    Asymmetric,
}

/// Affine 8-bit quantization parameters: `x = scale * (q - zero_point)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
}

impl QuantParams {
    pub const BITS: u32 = 8;

    pub fn new(scale: f32, zero_point: i32) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidQuantParams(format!(
                "scale must be positive, got {scale}"
            )));
        }
        if !(i8::MIN as i32..=i8::MAX as i32).contains(&zero_point) {
            return Err(Error::InvalidQuantParams(format!(
                "zero point {zero_point} outside [-128, 127]"
            )));
        }
        Ok(Self { scale, zero_point })
    }

    pub fn quantize_value(&self, x: f32) -> i8 {
        let q = (x as f64 / self.scale as f64).round() + self.zero_point as f64;
        q.clamp(i8::MIN as f64, i8::MAX as f64) as i8
    }

    pub fn dequantize_value(&self, q: i8) -> f32 {
        self.scale * (q as i32 - self.zero_point) as f32
    }
}

/// Derives quantization parameters for the observed range `[min, max]`.
///
/// The asymmetric range is widened to include zero so that zero is always
/// exactly representable.
pub fn compute_qparams(min: f32, max: f32, mode: QuantMode) -> Result<QuantParams> {
    if !(min.is_finite() && max.is_finite()) || min > max {
        return Err(Error::InvalidQuantParams(format!(
            "invalid range [{min}, {max}]"
        )));
    }
    if min == 0.0 && max == 0.0 {
        return Err(Error::DegenerateRange("range".into()));
    }
    match mode {
        QuantMode::Symmetric => {
            let bound = min.abs().max(max.abs()) as f64;
            QuantParams::new((bound / 127.0) as f32, 0)
        }
        QuantMode::Asymmetric => {
            let lo = min.min(0.0) as f64;
            let hi = max.max(0.0) as f64;
            let scale = ((hi - lo) / 255.0) as f32;
            let zp = (-128.0 - lo / scale as f64).round().clamp(-128.0, 127.0) as i32;
            QuantParams::new(scale, zp)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: TensorShape,
    data: Vec<i8>,
    qparams: QuantParams,
}

impl QuantizedTensor {
    pub fn new(shape: TensorShape, data: Vec<i8>, qparams: QuantParams) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::InvalidShape(format!(
                "{} elements for shape {shape}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            qparams,
        })
    }

    pub(crate) fn from_raw(shape: TensorShape, data: Vec<i8>, qparams: QuantParams) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        Self {
            shape,
            data,
            qparams,
        }
    }

    pub fn shape(&self) -> TensorShape {
        self.shape
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn qparams(&self) -> QuantParams {
        self.qparams
    }

    pub fn channel(&self, c: usize) -> &[i8] {
        let plane = self.shape.plane();
        &self.data[c * plane..(c + 1) * plane]
    }
}

pub fn quantize(t: &FloatTensor, qp: QuantParams) -> QuantizedTensor {
    let data = t.data().iter().map(|&x| qp.quantize_value(x)).collect();
    QuantizedTensor::from_raw(t.shape(), data, qp)
}

pub fn dequantize(q: &QuantizedTensor) -> FloatTensor {
    let qp = q.qparams();
    let data = q.data().iter().map(|&v| qp.dequantize_value(v)).collect();
    FloatTensor::from_raw(q.shape(), data)
}

/// Fixed-point encoding of a positive real rescale factor:
/// `scale ~= multiplier * 2^-shift` with `multiplier` in `[2^30, 2^31)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Requantizer {
    multiplier: i32,
    shift: i32,
}

impl Requantizer {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidQuantParams(format!(
                "requantize scale must be positive, got {scale}"
            )));
        }
        // scale = mantissa * 2^exp, mantissa in [0.5, 1)
        let mut exp = scale.log2().floor() as i32 + 1;
        let mut mantissa = scale / 2f64.powi(exp);
        while mantissa >= 1.0 {
            mantissa /= 2.0;
            exp += 1;
        }
        while mantissa < 0.5 {
            mantissa *= 2.0;
            exp -= 1;
        }
        let mut m = (mantissa * (1u64 << 31) as f64).round() as i64;
        if m == 1i64 << 31 {
            m >>= 1;
            exp += 1;
        }
        Ok(Self {
            multiplier: m as i32,
            shift: 31 - exp,
        })
    }

    pub fn multiplier(&self) -> i32 {
        self.multiplier
    }

    pub fn shift(&self) -> i32 {
        self.shift
    }

    /// The real value actually encoded.
    pub fn effective_scale(&self) -> f64 {
        self.multiplier as f64 * 2f64.powi(-self.shift)
    }

    /// `round_half_even(acc * multiplier >> shift)`, saturated to `i32`.
    pub fn apply(&self, acc: i32) -> i32 {
        let prod = acc as i128 * self.multiplier as i128;
        let v = if self.shift <= 0 {
            prod << (-self.shift).min(64)
        } else if self.shift >= 126 {
            0
        } else {
            let s = self.shift as u32;
            let floor = prod >> s;
            let rem = prod - (floor << s);
            let half = 1i128 << (s - 1);
            if rem > half || (rem == half && floor & 1 == 1) {
                floor + 1
            } else {
                floor
            }
        };
        v.clamp(i32::MIN as i128, i32::MAX as i128) as i32
    }
}

/// Integer-only rescale of a 32-bit accumulator into the int8 output domain.
pub fn requantize(acc: i32, rq: &Requantizer, out_zero_point: i32) -> i8 {
    let v = rq.apply(acc) as i64 + out_zero_point as i64;
    v.clamp(i8::MIN as i64, i8::MAX as i64) as i8
}
