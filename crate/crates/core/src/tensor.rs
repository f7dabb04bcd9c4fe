//! Dense tensors and the power-of-two affine quantization mapping.
//!
//! Real values are approximated as `x ≈ s · (x_int − z)` with `s = 2^(−f)`.
//! Integer samples of any quantized tensor are held widened in `i32`, with the
//! [`QuantParams`] recording width and signedness.

use std::fmt;

use crate::error::{Error, Result};

/// Channel-major dense tensor. For activations the shape is `[C, H, W]`, for
/// convolution weights `[O, I, kH, kW]`.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, payload has {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(f).collect(),
        }
    }

    /// `[C, H, W]` view of a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Shape(format!("expected [C, H, W], got {:?}", self.shape))),
        }
    }
}

impl<T: Clone> Tensor<T> {
    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }
}

impl<T: Clone + Default> Tensor<T> {
    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::full(shape, T::default())
    }
}

impl<T> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>{:?}", std::any::type_name::<T>(), self.shape)
    }
}

/// Per-tensor quantization parameters. The scale is always `2^(−fraction_bits)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct QuantParams {
    pub fraction_bits: i32,
    pub zero_point: i32,
    pub bit_width: u32,
    pub signed: bool,
}

impl QuantParams {
    pub fn new(fraction_bits: i32, zero_point: i32, bit_width: u32, signed: bool) -> Result<Self> {
        let max_width = if signed { 48 } else { 31 };
        if bit_width < 2 || bit_width > max_width {
            return Err(Error::Config(format!(
                "bit width {bit_width} unsupported (signed={signed})"
            )));
        }
        let q = Self {
            fraction_bits,
            zero_point,
            bit_width,
            signed,
        };
        let (lo, hi) = q.range();
        if (zero_point as i64) < lo || (zero_point as i64) > hi {
            return Err(Error::OutOfRange {
                value: zero_point as i64,
                lo,
                hi,
            });
        }
        Ok(q)
    }

    /// Signed grid with zero-point 0.
    pub fn symmetric(fraction_bits: i32, bit_width: u32) -> Self {
        Self {
            fraction_bits,
            zero_point: 0,
            bit_width,
            signed: true,
        }
    }

    /// Unsigned grid; `zero_point = 0` gives the one-tailed ReLU grid.
    pub fn unsigned(fraction_bits: i32, zero_point: i32, bit_width: u32) -> Self {
        Self {
            fraction_bits,
            zero_point,
            bit_width,
            signed: false,
        }
    }

    pub fn scale(&self) -> f64 {
        pow2(-self.fraction_bits)
    }

    pub fn is_symmetric(&self) -> bool {
        self.signed && self.zero_point == 0
    }

    /// Representable integer interval.
    pub fn range(&self) -> (i64, i64) {
        if self.signed {
            let half = 1i64 << (self.bit_width - 1);
            (-half, half - 1)
        } else {
            (0, (1i64 << self.bit_width) - 1)
        }
    }

    /// Real interval `[s·(lo − z), s·(hi − z)]` covered by the grid.
    pub fn real_range(&self) -> (f64, f64) {
        let (lo, hi) = self.range();
        let z = self.zero_point as i64;
        (
            (lo - z) as f64 * self.scale(),
            (hi - z) as f64 * self.scale(),
        )
    }
}

impl fmt::Display for QuantParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}{} f={} z={}",
            if self.signed { "s" } else { "u" },
            self.bit_width,
            self.fraction_bits,
            self.zero_point
        )
    }
}

/// Exact `2^e` as an `f64` for the exponents used here.
pub fn pow2(e: i32) -> f64 {
    2f64.powi(e)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoundMode {
    /// Ties go away from zero. Used for inputs, weights and biases.
    HalfAwayFromZero,
    /// Ties go toward +∞; this is what add-half-then-shift computes.
    HalfUp,
}

impl RoundMode {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            RoundMode::HalfAwayFromZero => v.round(),
            RoundMode::HalfUp => (v + 0.5).floor(),
        }
    }
}

/// Quantizes one value. Returns the clamped integer and whether it saturated.
#[inline]
pub fn quantize_value(x: f64, q: &QuantParams, mode: RoundMode) -> (i64, bool) {
    let (lo, hi) = q.range();
    let v = mode.apply(x * pow2(q.fraction_bits)) + q.zero_point as f64;
    if v.is_nan() {
        return (q.zero_point as i64, true);
    }
    if v < lo as f64 {
        (lo, true)
    } else if v > hi as f64 {
        (hi, true)
    } else {
        (v as i64, false)
    }
}

#[inline]
pub fn dequantize_value(x: i64, q: &QuantParams) -> f64 {
    (x - q.zero_point as i64) as f64 * q.scale()
}

/// Integer tensor together with its grid and the number of clamped samples.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub values: Tensor<i32>,
    pub params: QuantParams,
    pub saturated: usize,
}

/// `clamp(round(x / s) + z)` elementwise, rounding half away from zero.
pub fn quantize_affine(t: &Tensor<f32>, q: &QuantParams) -> QuantizedTensor {
    quantize_affine_with(t, q, RoundMode::HalfAwayFromZero)
}

pub fn quantize_affine_with(t: &Tensor<f32>, q: &QuantParams, mode: RoundMode) -> QuantizedTensor {
    let mut saturated = 0;
    let values = t.map(|&x| {
        let (v, sat) = quantize_value(x as f64, q, mode);
        saturated += sat as usize;
        v as i32
    });
    QuantizedTensor {
        values,
        params: *q,
        saturated,
    }
}

/// `s · (x_int − z)` elementwise. Samples outside the grid mean the tensor was
/// produced under different parameters and are rejected.
pub fn dequantize(t: &Tensor<i32>, q: &QuantParams) -> Result<Tensor<f32>> {
    let (lo, hi) = q.range();
    if let Some(&bad) = t.data().iter().find(|&&v| (v as i64) < lo || (v as i64) > hi) {
        return Err(Error::OutOfRange {
            value: bad as i64,
            lo,
            hi,
        });
    }
    Ok(t.map(|&v| dequantize_value(v as i64, q) as f32))
}

/// `dequantize(quantize_affine(x))` in one step, in `f64`.
#[inline]
pub fn fake_quantize_value(x: f64, q: &QuantParams, mode: RoundMode) -> f64 {
    dequantize_value(quantize_value(x, q, mode).0, q)
}
