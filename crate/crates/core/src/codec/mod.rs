//! Lossless serialization of the auxiliary payload: an adaptive binary
//! arithmetic coder and the framed layout for the latent and overflow map.

pub mod arith;
pub mod payload;

pub use arith::{ac_decode, ac_encode, ArithDecoder, ArithEncoder, BinModel};
pub use payload::{decode_payload, encode_payload, read_header, AuxPayload, PayloadHeader, HEADER_BITS};

/// A bit sequence; `true` is 1.
pub type Bitstream = Vec<bool>;

/// Packs bits MSB-first; the final byte is zero-padded.
pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    bits.chunks(8)
        .map(|c| {
            c.iter()
                .enumerate()
                .fold(0u8, |acc, (i, &b)| acc | ((b as u8) << (7 - i)))
        })
        .collect()
}

/// Inverse of [`pack_bits`] for a known bit count.
pub fn unpack_bits(bytes: &[u8], n_bits: usize) -> Bitstream {
    (0..n_bits.min(bytes.len() * 8))
        .map(|i| bytes[i / 8] >> (7 - i % 8) & 1 == 1)
        .collect()
}

/// Appends the `width` low bits of `value`, most significant first.
pub fn push_bits(out: &mut Bitstream, value: u64, width: usize) {
    for i in (0..width).rev() {
        out.push(value >> i & 1 == 1);
    }
}

/// Reads `width` bits MSB-first starting at `*pos`.
pub fn read_bits(bits: &[bool], pos: &mut usize, width: usize) -> Option<u64> {
    if *pos + width > bits.len() {
        return None;
    }
    let v = bits[*pos..*pos + width]
        .iter()
        .fold(0u64, |acc, &b| acc << 1 | b as u64);
    *pos += width;
    Some(v)
}
