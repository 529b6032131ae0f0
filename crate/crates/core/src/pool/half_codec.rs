//! IEEE 754 binary16 wire codec.
//!
//! Encoding rounds to nearest, ties to even. Finite values whose rounded
//! magnitude would overflow are clamped to ±65504 instead of becoming
//! infinite; infinities and NaN pass through.

use half::f16;

use crate::error::{Error, Result};

pub const HALF_MAX: f32 = 65504.0;

#[inline]
pub fn to_half(v: f32) -> f16 {
    let h = f16::from_f32(v);
    if h.is_infinite() && v.is_finite() {
        if v > 0.0 {
            f16::MAX
        } else {
            f16::MIN
        }
    } else {
        h
    }
}

pub fn encode_half(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 2);
    for &v in values {
        out.extend_from_slice(&to_half(v).to_bits().to_le_bytes());
    }
    out
}

pub fn decode_half(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 2 != 0 {
        return Err(Error::Format(format!(
            "half-precision payload has odd length {}",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|c| f16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f32())
        .collect())
}
