//! Dense n-dimensional numeric arrays with bit-level element access.
//!
//! Every element exposes its exact stored bit pattern through
//! [`Tensor::get_bits`] / [`Tensor::set_bits`], which is what the error
//! models operate on. F16 elements are raw binary16 patterns; arithmetic
//! widens to f32 and narrows back with round-to-nearest-even.

use crate::error::{Error, Result};
use crate::f16::{f16_to_f32, f32_to_f16};

/// Element type tag. I16/I8 are two's-complement integers produced by
/// quantization; F16 is stored as a 16-bit pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F16,
    I16,
    I8,
}

impl DType {
    pub fn word_bits(self) -> u32 {
        match self {
            DType::F32 => 32,
            DType::F16 => 16,
            DType::I16 => 16,
            DType::I8 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F16 => "f16",
            DType::I16 => "i16",
            DType::I8 => "i8",
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, DType::F32 | DType::F16)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Buffer {
    F32(Vec<f32>),
    F16(Vec<u16>),
    I16(Vec<i16>),
    I8(Vec<i8>),
}

impl Buffer {
    fn len(&self) -> usize {
        match self {
            Buffer::F32(v) => v.len(),
            Buffer::F16(v) => v.len(),
            Buffer::I16(v) => v.len(),
            Buffer::I8(v) => v.len(),
        }
    }
}

/// Dense row-major tensor. Carrier of activations and weights.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Buffer,
}

impl Tensor {
    fn check_shape(shape: &[usize], len: usize) -> Result<()> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Argument(format!("invalid shape {shape:?}")));
        }
        let count: usize = shape.iter().product();
        if count != len {
            return Err(Error::Argument(format!(
                "shape {shape:?} has {count} elements, buffer has {len}"
            )));
        }
        Ok(())
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::check_shape(&shape, data.len())?;
        Ok(Tensor { shape, data: Buffer::F32(data) })
    }

    /// F16 tensor from raw binary16 patterns.
    pub fn from_f16_bits(shape: Vec<usize>, data: Vec<u16>) -> Result<Self> {
        Self::check_shape(&shape, data.len())?;
        Ok(Tensor { shape, data: Buffer::F16(data) })
    }

    pub fn from_i16(shape: Vec<usize>, data: Vec<i16>) -> Result<Self> {
        Self::check_shape(&shape, data.len())?;
        Ok(Tensor { shape, data: Buffer::I16(data) })
    }

    pub fn from_i8(shape: Vec<usize>, data: Vec<i8>) -> Result<Self> {
        Self::check_shape(&shape, data.len())?;
        Ok(Tensor { shape, data: Buffer::I8(data) })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let count = shape.iter().product();
        Tensor { shape, data: Buffer::F32(vec![0.0; count]) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        match &self.data {
            Buffer::F32(_) => DType::F32,
            Buffer::F16(_) => DType::F16,
            Buffer::I16(_) => DType::I16,
            Buffer::I8(_) => DType::I8,
        }
    }

    pub fn element_count(&self) -> usize {
        self.data.len()
    }

    /// Row-major offset of a coordinate tuple. Bijective over valid coords.
    pub fn flat_index(&self, coords: &[usize]) -> Result<usize> {
        flat_index(&self.shape, coords)
    }

    /// Exact stored bit pattern of an element, in the low bits of the word.
    pub fn get_bits(&self, offset: usize) -> Result<u32> {
        if offset >= self.data.len() {
            return Err(Error::Index(format!(
                "offset {offset} >= element count {}",
                self.data.len()
            )));
        }
        Ok(match &self.data {
            Buffer::F32(v) => v[offset].to_bits(),
            Buffer::F16(v) => v[offset] as u32,
            Buffer::I16(v) => v[offset] as u16 as u32,
            Buffer::I8(v) => v[offset] as u8 as u32,
        })
    }

    /// Store an exact bit pattern into an element. The word must fit the
    /// dtype's width.
    pub fn set_bits(&mut self, offset: usize, word: u32) -> Result<()> {
        if offset >= self.data.len() {
            return Err(Error::Index(format!(
                "offset {offset} >= element count {}",
                self.data.len()
            )));
        }
        let bits = self.dtype().word_bits();
        if bits < 32 && word >> bits != 0 {
            return Err(Error::Argument(format!(
                "word {word:#x} exceeds {bits}-bit width"
            )));
        }
        match &mut self.data {
            Buffer::F32(v) => v[offset] = f32::from_bits(word),
            Buffer::F16(v) => v[offset] = word as u16,
            Buffer::I16(v) => v[offset] = word as u16 as i16,
            Buffer::I8(v) => v[offset] = word as u8 as i8,
        }
        Ok(())
    }

    /// Element value widened to f32 (F16 via exact widening, integers as-is).
    pub fn value_at(&self, offset: usize) -> f32 {
        match &self.data {
            Buffer::F32(v) => v[offset],
            Buffer::F16(v) => f16_to_f32(v[offset]),
            Buffer::I16(v) => v[offset] as f32,
            Buffer::I8(v) => v[offset] as f32,
        }
    }

    /// Store a numeric value, encoding per dtype: F16 narrows with
    /// round-to-nearest-even, integers round half-away-from-zero and
    /// saturate.
    pub fn set_value(&mut self, offset: usize, value: f32) {
        match &mut self.data {
            Buffer::F32(v) => v[offset] = value,
            Buffer::F16(v) => v[offset] = f32_to_f16(value),
            Buffer::I16(v) => {
                v[offset] = (value as f64).round().clamp(-32768.0, 32767.0) as i16
            }
            Buffer::I8(v) => {
                v[offset] = (value as f64).round().clamp(-128.0, 127.0) as i8
            }
        }
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            Buffer::F32(v) => Ok(v),
            _ => Err(Error::Argument(format!(
                "expected f32 tensor, got {}",
                self.dtype().name()
            ))),
        }
    }

    pub fn as_f32_mut(&mut self) -> Result<&mut [f32]> {
        let name = self.dtype().name();
        match &mut self.data {
            Buffer::F32(v) => Ok(v),
            _ => Err(Error::Argument(format!("expected f32 tensor, got {name}"))),
        }
    }

    /// All element values widened to f32.
    pub fn to_f32_vec(&self) -> Vec<f32> {
        (0..self.element_count()).map(|i| self.value_at(i)).collect()
    }

    /// True when both tensors hold identical bit patterns (NaN-safe).
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        if self.shape != other.shape || self.dtype() != other.dtype() {
            return false;
        }
        (0..self.element_count())
            .all(|i| self.get_bits(i).unwrap() == other.get_bits(i).unwrap())
    }
}

/// Row-major offset for `coords` in a tensor of the given shape.
pub fn flat_index(shape: &[usize], coords: &[usize]) -> Result<usize> {
    if coords.len() != shape.len() {
        return Err(Error::Index(format!(
            "expected {} coords, got {}",
            shape.len(),
            coords.len()
        )));
    }
    let mut offset = 0usize;
    for (c, d) in coords.iter().zip(shape) {
        if c >= d {
            return Err(Error::Index(format!(
                "coord {c} out of range for extent {d}"
            )));
        }
        offset = offset * d + c;
    }
    Ok(offset)
}

/// Inverse of [`flat_index`]: decode a row-major offset into coordinates.
pub fn unflatten(shape: &[usize], mut offset: usize) -> Vec<usize> {
    let mut coords = vec![0usize; shape.len()];
    for i in (0..shape.len()).rev() {
        coords[i] = offset % shape[i];
        offset /= shape[i];
    }
    coords
}
