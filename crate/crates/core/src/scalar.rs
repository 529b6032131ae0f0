//! Scalar element types that can live in a gradient pool and travel on the
//! wire.

use std::fmt::Debug;

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pool::half_codec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementType {
    Fp32,
    Fp16,
}

impl ElementType {
    pub fn size(self) -> usize {
        match self {
            ElementType::Fp32 => 4,
            ElementType::Fp16 => 2,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            ElementType::Fp32 => 0,
            ElementType::Fp16 => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(ElementType::Fp32),
            1 => Ok(ElementType::Fp16),
            other => Err(Error::Format(format!("unknown element type code {other}"))),
        }
    }
}

impl std::str::FromStr for ElementType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp32" => Ok(ElementType::Fp32),
            "fp16" => Ok(ElementType::Fp16),
            other => Err(Error::config(format!("unknown precision '{other}'"))),
        }
    }
}

impl std::fmt::Display for ElementType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ElementType::Fp32 => "fp32",
            ElementType::Fp16 => "fp16",
        })
    }
}

/// A reducible scalar with a fixed little-endian wire encoding.
pub trait Element: Copy + Default + PartialEq + Debug + Send + Sync + 'static {
    const KIND: ElementType;
    const SIZE: usize;

    fn to_f32(self) -> f32;
    fn from_f32(v: f32) -> Self;

    /// One reduction step. fp16 widens to fp32 and rounds back.
    fn add(self, other: Self) -> Self;

    fn write_le(src: &[Self], out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const KIND: ElementType = ElementType::Fp32;
    const SIZE: usize = 4;

    #[inline]
    fn to_f32(self) -> f32 {
        self
    }

    #[inline]
    fn from_f32(v: f32) -> Self {
        v
    }

    #[inline]
    fn add(self, other: Self) -> Self {
        self + other
    }

    fn write_le(src: &[Self], out: &mut Vec<u8>) {
        out.reserve(src.len() * 4);
        for v in src {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    #[inline]
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Element for f16 {
    const KIND: ElementType = ElementType::Fp16;
    const SIZE: usize = 2;

    #[inline]
    fn to_f32(self) -> f32 {
        f16::to_f32(self)
    }

    #[inline]
    fn from_f32(v: f32) -> Self {
        half_codec::to_half(v)
    }

    #[inline]
    fn add(self, other: Self) -> Self {
        half_codec::to_half(f16::to_f32(self) + f16::to_f32(other))
    }

    fn write_le(src: &[Self], out: &mut Vec<u8>) {
        out.reserve(src.len() * 2);
        for v in src {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }

    #[inline]
    fn read_le(bytes: &[u8]) -> Self {
        f16::from_bits(u16::from_le_bytes(bytes[..2].try_into().unwrap()))
    }
}

pub(crate) fn encode<T: Element>(src: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(src.len() * T::SIZE);
    T::write_le(src, &mut out);
    out
}

fn check_len<T: Element>(bytes: &[u8], dst: &[T]) -> Result<()> {
    if bytes.len() != dst.len() * T::SIZE {
        return Err(Error::protocol(format!(
            "expected {} payload bytes ({} x {}), got {}",
            dst.len() * T::SIZE,
            dst.len(),
            T::KIND,
            bytes.len()
        )));
    }
    Ok(())
}

pub(crate) fn decode_into<T: Element>(bytes: &[u8], dst: &mut [T]) -> Result<()> {
    check_len(bytes, dst)?;
    for (d, c) in dst.iter_mut().zip(bytes.chunks_exact(T::SIZE)) {
        *d = T::read_le(c);
    }
    Ok(())
}

pub(crate) fn accumulate_into<T: Element>(bytes: &[u8], dst: &mut [T]) -> Result<()> {
    check_len(bytes, dst)?;
    for (d, c) in dst.iter_mut().zip(bytes.chunks_exact(T::SIZE)) {
        *d = T::read_le(c).add(*d);
    }
    Ok(())
}

/// Owned contiguous scalars of one element type.
#[derive(Debug, Clone, PartialEq)]
pub enum ScalarBuffer {
    Fp32(Vec<f32>),
    Fp16(Vec<f16>),
}

impl ScalarBuffer {
    pub fn from_f32(values: &[f32], ty: ElementType) -> Self {
        match ty {
            ElementType::Fp32 => ScalarBuffer::Fp32(values.to_vec()),
            ElementType::Fp16 => {
                ScalarBuffer::Fp16(values.iter().map(|&v| half_codec::to_half(v)).collect())
            }
        }
    }

    pub fn element_type(&self) -> ElementType {
        match self {
            ScalarBuffer::Fp32(_) => ElementType::Fp32,
            ScalarBuffer::Fp16(_) => ElementType::Fp16,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ScalarBuffer::Fp32(v) => v.len(),
            ScalarBuffer::Fp16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn byte_len(&self) -> usize {
        self.len() * self.element_type().size()
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        match self {
            ScalarBuffer::Fp32(v) => v.clone(),
            ScalarBuffer::Fp16(v) => v.iter().map(|h| h.to_f32()).collect(),
        }
    }
}
