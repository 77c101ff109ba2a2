//! Watermark bits as text and as files. Both forms are MSB-first; a bit count
//! that is not a multiple of the digit width is padded with zeros, and the
//! padding must stay zero on input.

use crate::error::{Error, Result};

fn bit_count_err(m: usize, need: usize, got: usize, unit: &str) -> Error {
    Error::BadParams(format!("{m} bits need {need} {unit}, got {got}"))
}

fn unpack(words: &[u8], width: usize, m: usize) -> Result<Vec<bool>> {
    let bits: Vec<bool> = words
        .iter()
        .flat_map(|&w| (0..width).rev().map(move |i| w >> i & 1 == 1))
        .collect();
    if bits[m..].iter().any(|&b| b) {
        return Err(Error::BadParams("nonzero padding bits".into()));
    }
    Ok(bits[..m].to_vec())
}

/// `m` bits from hex text; an optional `0x` prefix and surrounding
/// whitespace are accepted.
pub fn parse_hex_bits(text: &str, m: usize) -> Result<Vec<bool>> {
    let t = text.trim();
    let t = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")).unwrap_or(t);
    if t.len() != m.div_ceil(4) {
        return Err(bit_count_err(m, m.div_ceil(4), t.len(), "hex digits"));
    }
    let digits = t
        .chars()
        .map(|c| c.to_digit(16).map(|d| d as u8))
        .collect::<Option<Vec<u8>>>()
        .ok_or_else(|| Error::BadParams(format!("not a hex string: {t:?}")))?;
    unpack(&digits, 4, m)
}

pub fn bits_to_hex(bits: &[bool]) -> String {
    bits.chunks(4)
        .map(|c| {
            let v = c
                .iter()
                .enumerate()
                .fold(0u32, |acc, (i, &b)| acc | (b as u32) << (3 - i));
            char::from_digit(v, 16).unwrap_or('0')
        })
        .collect()
}

/// `m` bits from raw bytes.
pub fn bytes_to_bits(bytes: &[u8], m: usize) -> Result<Vec<bool>> {
    if bytes.len() != m.div_ceil(8) {
        return Err(bit_count_err(m, m.div_ceil(8), bytes.len(), "bytes"));
    }
    unpack(bytes, 8, m)
}

pub fn bits_to_bytes(bits: &[bool]) -> Vec<u8> {
    bits.chunks(8)
        .map(|c| {
            c.iter()
                .enumerate()
                .fold(0u8, |acc, (i, &b)| acc | (b as u8) << (7 - i))
        })
        .collect()
}
