//! Framing of the auxiliary payload (latent `z` and overflow magnitudes `O`).
//!
//! ```text
//! magic (2) | M (16) | z bits (24) | O bits (24) | CRC-16 (16) | z section | O section
//! ```
//!
//! Each section is an independent arithmetic-coded stream. `z` entries are
//! signed Exp-Golomb order 0; `O` is a significance bin per pixel followed by
//! order-0 Exp-Golomb codes of `magnitude - 1` for the nonzero entries. The
//! CRC covers the decoded values (z then O, each as `i64` little-endian).

use crc::{Crc, CRC_16_IBM_3740};

use super::arith::{ArithDecoder, ArithEncoder, BinModel};
use super::{push_bits, read_bits, Bitstream};
use crate::error::{shape_err, Error, Result};
use crate::numerics::IntTensor;

const MAGIC: u64 = 0b01;
const MAGIC_BITS: usize = 2;
const M_BITS: usize = 16;
const LEN_BITS: usize = 24;
const CRC_BITS: usize = 16;
pub const HEADER_BITS: usize = MAGIC_BITS + M_BITS + 2 * LEN_BITS + CRC_BITS;

/// Largest `|z|` the binarization accepts.
pub const Z_LIMIT: i64 = 1 << 20;
/// Exp-Golomb prefixes longer than this cannot come from a valid stream.
const MAX_PREFIX: usize = 62;
const CONTEXTS: usize = 24;

const CRC16: Crc<u16> = Crc::<u16>::new(&CRC_16_IBM_3740);

/// Latent `[1,L,L]` and unsigned overflow magnitudes `[C,H,W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxPayload {
    pub z: IntTensor,
    pub overflow: IntTensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PayloadHeader {
    pub m: usize,
    pub z_bits: usize,
    pub o_bits: usize,
    pub crc: u16,
}

impl PayloadHeader {
    pub fn total_bits(&self) -> usize {
        HEADER_BITS + self.z_bits + self.o_bits
    }
}

/// Adaptive contexts for one Exp-Golomb alphabet.
#[derive(Debug, Clone)]
struct GolombModels {
    prefix: [BinModel; CONTEXTS],
    suffix: [BinModel; CONTEXTS],
    sign: BinModel,
}

impl GolombModels {
    fn new() -> Self {
        GolombModels {
            prefix: [BinModel::new(); CONTEXTS],
            suffix: [BinModel::new(); CONTEXTS],
            sign: BinModel::new(),
        }
    }

    /// `k` ones, a terminating zero, then the `k` low bits of `value + 1`.
    fn encode_unsigned(&mut self, enc: &mut ArithEncoder, value: u64) {
        let x = value + 1;
        let k = (63 - x.leading_zeros()) as usize;
        for j in 0..k {
            enc.encode(true, &mut self.prefix[j.min(CONTEXTS - 1)]);
        }
        enc.encode(false, &mut self.prefix[k.min(CONTEXTS - 1)]);
        for j in (0..k).rev() {
            enc.encode(x >> j & 1 == 1, &mut self.suffix[j.min(CONTEXTS - 1)]);
        }
    }

    fn decode_unsigned(&mut self, dec: &mut ArithDecoder) -> Result<u64> {
        let mut k = 0;
        while dec.decode(&mut self.prefix[k.min(CONTEXTS - 1)])? {
            k += 1;
            if k > MAX_PREFIX {
                return Err(Error::MalformedHeader("Exp-Golomb prefix too long".into()));
            }
        }
        let mut x = 1u64;
        for j in (0..k).rev() {
            x = x << 1 | dec.decode(&mut self.suffix[j.min(CONTEXTS - 1)])? as u64;
        }
        Ok(x - 1)
    }

    fn encode_signed(&mut self, enc: &mut ArithEncoder, v: i64) {
        self.encode_unsigned(enc, v.unsigned_abs());
        if v != 0 {
            enc.encode(v < 0, &mut self.sign);
        }
    }

    fn decode_signed(&mut self, dec: &mut ArithDecoder) -> Result<i64> {
        let m = self.decode_unsigned(dec)?;
        if m == 0 {
            return Ok(0);
        }
        if m > Z_LIMIT as u64 {
            return Err(Error::RangeExceeded(m.min(i64::MAX as u64) as i64));
        }
        let negative = dec.decode(&mut self.sign)?;
        Ok(if negative { -(m as i64) } else { m as i64 })
    }
}

fn checksum(z: &[i64], overflow: &[i64]) -> u16 {
    let mut digest = CRC16.digest();
    for v in z.iter().chain(overflow) {
        digest.update(&v.to_le_bytes());
    }
    digest.finalize()
}

fn encode_z(z: &[i64]) -> Result<Bitstream> {
    let mut enc = ArithEncoder::new();
    let mut models = GolombModels::new();
    for &v in z {
        if v.abs() > Z_LIMIT {
            return Err(Error::RangeExceeded(v));
        }
        models.encode_signed(&mut enc, v);
    }
    Ok(enc.finish())
}

fn encode_overflow(o: &[i64]) -> Result<Bitstream> {
    let mut enc = ArithEncoder::new();
    let mut significance = BinModel::new();
    for &v in o {
        if v < 0 {
            return Err(Error::RangeExceeded(v));
        }
        enc.encode(v != 0, &mut significance);
    }
    let mut models = GolombModels::new();
    for &v in o.iter().filter(|&&v| v != 0) {
        models.encode_unsigned(&mut enc, (v - 1) as u64);
    }
    Ok(enc.finish())
}

pub fn encode_payload(p: &AuxPayload) -> Result<Bitstream> {
    let m = p.z.len();
    if m >= 1 << M_BITS {
        return Err(Error::BadParams(format!("{m} watermark bits exceed the header field")));
    }
    let z_section = encode_z(p.z.data())?;
    let o_section = encode_overflow(p.overflow.data())?;
    for len in [z_section.len(), o_section.len()] {
        if len >= 1 << LEN_BITS {
            return Err(Error::RangeExceeded(len as i64));
        }
    }
    let mut out = Vec::with_capacity(HEADER_BITS + z_section.len() + o_section.len());
    push_bits(&mut out, MAGIC, MAGIC_BITS);
    push_bits(&mut out, m as u64, M_BITS);
    push_bits(&mut out, z_section.len() as u64, LEN_BITS);
    push_bits(&mut out, o_section.len() as u64, LEN_BITS);
    push_bits(&mut out, checksum(p.z.data(), p.overflow.data()) as u64, CRC_BITS);
    out.extend(z_section);
    out.extend(o_section);
    Ok(out)
}

/// Parses and sanity-checks the fixed header.
pub fn read_header(bits: &[bool]) -> Result<PayloadHeader> {
    let mut pos = 0;
    let mut field = |w| read_bits(bits, &mut pos, w).ok_or(Error::TruncatedStream);
    if field(MAGIC_BITS)? != MAGIC {
        return Err(Error::MalformedHeader("bad payload magic".into()));
    }
    let header = PayloadHeader {
        m: field(M_BITS)? as usize,
        z_bits: field(LEN_BITS)? as usize,
        o_bits: field(LEN_BITS)? as usize,
        crc: field(CRC_BITS)? as u16,
    };
    if bits.len() < header.total_bits() {
        return Err(Error::TruncatedStream);
    }
    Ok(header)
}

/// Decodes a payload for an image of `image_shape = [C,H,W]` carrying `m`
/// watermark bits. Trailing bits after the O section are ignored.
pub fn decode_payload(bits: &[bool], image_shape: [usize; 3], m: usize) -> Result<AuxPayload> {
    let header = read_header(bits)?;
    if header.m != m {
        return Err(Error::MalformedHeader(format!(
            "payload carries {} watermark bits, geometry expects {m}",
            header.m
        )));
    }
    let side = (m as f64).sqrt() as usize;
    if side * side != m {
        return Err(shape_err(format!("{m} is not a square bit count")));
    }
    let z_start = HEADER_BITS;
    let o_start = z_start + header.z_bits;
    let z_slice = &bits[z_start..o_start];
    let o_slice = &bits[o_start..o_start + header.o_bits];

    let mut dec = ArithDecoder::new(z_slice)?;
    let mut models = GolombModels::new();
    let z = (0..m)
        .map(|_| models.decode_signed(&mut dec))
        .collect::<Result<Vec<i64>>>()?;

    let n: usize = image_shape.iter().product();
    let mut dec = ArithDecoder::new(o_slice)?;
    let mut significance = BinModel::new();
    let flags = (0..n)
        .map(|_| dec.decode(&mut significance))
        .collect::<Result<Vec<bool>>>()?;
    let mut models = GolombModels::new();
    let mut overflow = vec![0i64; n];
    for (o, &significant) in overflow.iter_mut().zip(&flags) {
        if significant {
            let mag = models.decode_unsigned(&mut dec)?;
            *o = i64::try_from(mag + 1).map_err(|_| Error::RangeExceeded(i64::MAX))?;
        }
    }

    let computed = checksum(&z, &overflow);
    if computed != header.crc {
        return Err(Error::ChecksumMismatch {
            stored: header.crc as u32,
            computed: computed as u32,
        });
    }
    Ok(AuxPayload {
        z: IntTensor::new(vec![1, side, side], z)?,
        overflow: IntTensor::new(image_shape.to_vec(), overflow)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn payload(z: Vec<i64>, o: Vec<i64>, shape: [usize; 3]) -> AuxPayload {
        let side = (z.len() as f64).sqrt() as usize;
        AuxPayload {
            z: IntTensor::new(vec![1, side, side], z).unwrap(),
            overflow: IntTensor::new(shape.to_vec(), o).unwrap(),
        }
    }

    #[test]
    fn single_overflow_entry_roundtrip() {
        let mut o = vec![0; 64];
        o[17] = 5;
        let p = payload(vec![0, 1, -2, 3], o, [1, 8, 8]);
        let bits = encode_payload(&p).unwrap();
        let back = decode_payload(&bits, [1, 8, 8], 4).unwrap();
        assert_eq!(back, p);
        let nz: Vec<_> = back
            .overflow
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0)
            .collect();
        assert_eq!(nz, vec![(17, &5)]);
    }

    #[test]
    fn header_accounts_for_every_bit() {
        let p = payload(vec![7; 16], vec![0; 256], [1, 16, 16]);
        let bits = encode_payload(&p).unwrap();
        let h = read_header(&bits).unwrap();
        assert_eq!(h.total_bits(), bits.len());
        assert_eq!(h.m, 16);
    }

    #[test]
    fn geometry_mismatch_rejected_before_sections() {
        let p = payload(vec![0; 4], vec![0; 64], [1, 8, 8]);
        let bits = encode_payload(&p).unwrap();
        assert!(matches!(
            decode_payload(&bits, [1, 8, 8], 16),
            Err(Error::MalformedHeader(_))
        ));
    }

    #[test]
    fn z_envelope_enforced() {
        let p = payload(vec![0, Z_LIMIT + 1, 0, 0], vec![0; 4], [1, 2, 2]);
        assert!(matches!(encode_payload(&p), Err(Error::RangeExceeded(_))));
        let ok = payload(vec![0, -Z_LIMIT, Z_LIMIT, 0], vec![0; 4], [1, 2, 2]);
        let bits = encode_payload(&ok).unwrap();
        assert_eq!(decode_payload(&bits, [1, 2, 2], 4).unwrap(), ok);
    }

    #[test]
    fn truncated_header() {
        assert!(matches!(
            read_header(&[false, true, false]),
            Err(Error::TruncatedStream)
        ));
    }
}
