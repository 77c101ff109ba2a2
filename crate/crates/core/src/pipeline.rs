//! Two-stage embedding: the invertible network writes the watermark, the
//! overflowed pixels are clipped, and the latent plus the clipped excursions are
//! hidden reversibly in the clipped stego. Extraction over a lossy channel only
//! needs the network; recovery over a lossless channel undoes both stages.

use crate::codec::payload::{decode_payload, encode_payload, read_header, AuxPayload};
use crate::error::{shape_err, Error, Result};
use crate::iflow::{bits_to_map, iiwn_forward, iiwn_inverse_lossless, iiwn_inverse_lossy, map_to_bits, IIWNParams};
use crate::numerics::{IntTensor, RealTensor};
use crate::rdh::{pee_embed, pee_extract_restore};

const LO: i64 = 0;
const HI: i64 = 255;

/// The final stego and what it cost to make it reversible.
#[derive(Debug, Clone, PartialEq)]
pub struct StegoArtifacts {
    pub stego: IntTensor,
    /// Auxiliary bitstream length; always `HEADER_BITS + z_bits + o_bits`.
    pub aux_bits: usize,
    pub z_bits: usize,
    pub o_bits: usize,
    /// Pixels the network pushed outside `[0, 255]`.
    pub overflow_count: usize,
    pub z_min: i64,
    pub z_max: i64,
    pub rdh_threshold: u8,
}

/// Splits an overflowed stego into unsigned excursion magnitudes and the
/// clipped image. The side of each excursion is implied by the rail it was
/// clipped to.
pub fn build_overflow_map(stego_o: &IntTensor) -> (IntTensor, IntTensor) {
    let overflow = stego_o.map(|v| {
        if v > HI {
            v - HI
        } else if v < LO {
            LO - v
        } else {
            0
        }
    });
    (overflow, stego_o.map(|v| v.clamp(LO, HI)))
}

/// Exact inverse of [`build_overflow_map`].
pub fn reconstruct_overflowed(clipped: &IntTensor, overflow: &IntTensor) -> Result<IntTensor> {
    if clipped.shape() != overflow.shape() {
        return Err(shape_err(format!("{:?} vs {:?}", clipped.shape(), overflow.shape())));
    }
    let data = clipped
        .data()
        .iter()
        .zip(overflow.data())
        .enumerate()
        .map(|(k, (&c, &o))| match (c, o) {
            (_, 0) => Ok(c),
            (HI, o) if o > 0 => Ok(HI + o),
            (LO, o) if o > 0 => Ok(LO - o),
            _ => Err(Error::InconsistentMap(k)),
        })
        .collect::<Result<Vec<i64>>>()?;
    IntTensor::new(clipped.shape().to_vec(), data)
}

fn check_pixels(img: &IntTensor, what: &str) -> Result<()> {
    match img.data().iter().find(|&&v| !(LO..=HI).contains(&v)) {
        Some(v) => Err(Error::BadParams(format!("{what} pixel {v} outside [0, 255]"))),
        None => Ok(()),
    }
}

/// First stage: the clipped network stego and the auxiliary bitstream that
/// makes it reversible.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkStego {
    pub clipped: IntTensor,
    pub aux: Vec<bool>,
    pub z_bits: usize,
    pub o_bits: usize,
    /// Pixels the network pushed outside `[0, 255]`.
    pub overflow_count: usize,
    pub z_min: i64,
    pub z_max: i64,
}

/// Runs the network on `cover` and codes the latent and the excursions.
pub fn network_stage(cover: &IntTensor, bits: &[bool], theta: &IIWNParams) -> Result<NetworkStego> {
    check_pixels(cover, "cover")?;
    let map = bits_to_map(bits, theta.geometry.map_side)?;
    let (stego_o, z) = iiwn_forward(cover, &map, theta)?;
    let (overflow, clipped) = build_overflow_map(&stego_o);
    let overflow_count = overflow.data().iter().filter(|&&v| v != 0).count();
    let aux = encode_payload(&AuxPayload { z: z.clone(), overflow })?;
    let header = read_header(&aux)?;
    Ok(NetworkStego {
        clipped,
        aux,
        z_bits: header.z_bits,
        o_bits: header.o_bits,
        overflow_count,
        z_min: z.data().iter().copied().min().unwrap_or(0),
        z_max: z.data().iter().copied().max().unwrap_or(0),
    })
}

/// Watermarks `cover` with `bits` (one per map entry, row-major).
pub fn embed(cover: &IntTensor, bits: &[bool], theta: &IIWNParams) -> Result<StegoArtifacts> {
    let net = network_stage(cover, bits, theta)?;
    let rdh = pee_embed(&net.clipped, &net.aux)?;
    Ok(StegoArtifacts {
        stego: rdh.image,
        aux_bits: net.aux.len(),
        z_bits: net.z_bits,
        o_bits: net.o_bits,
        overflow_count: net.overflow_count,
        z_min: net.z_min,
        z_max: net.z_max,
        rdh_threshold: rdh.threshold,
    })
}

/// Robust extraction from a possibly distorted stego, with a zero latent.
/// Returns the bits and the map logits they were thresholded from.
pub fn extract(noised: &IntTensor, theta: &IIWNParams) -> Result<(Vec<bool>, RealTensor)> {
    check_pixels(noised, "stego")?;
    let z_hat = RealTensor::zeros(&theta.geometry.map_shape());
    let (_, logits) = iiwn_inverse_lossy(&noised.to_real(), &z_hat, theta)?;
    Ok((map_to_bits(&logits), logits))
}

/// Bit-exact recovery of the cover and the watermark from an unmodified stego.
/// Any modification surfaces as an error rather than a wrong cover.
pub fn recover(stego: &IntTensor, theta: &IIWNParams) -> Result<(IntTensor, Vec<bool>)> {
    check_pixels(stego, "stego")?;
    let geo = &theta.geometry;
    let (clipped, aux) = pee_extract_restore(stego)?;
    if read_header(&aux)?.total_bits() != aux.len() {
        return Err(Error::MalformedHeader(
            "auxiliary stream length disagrees with its header".into(),
        ));
    }
    let payload = decode_payload(&aux, geo.image_shape(), geo.bits())?;
    let stego_o = reconstruct_overflowed(&clipped, &payload.overflow)?;
    let (cover, map) = iiwn_inverse_lossless(&stego_o, &payload.z, theta)?;
    check_pixels(&cover, "recovered cover")?;
    if let Some(k) = map.data().iter().position(|&v| v != 1 && v != -1) {
        return Err(Error::MalformedHeader(format!("recovered map entry {k} is not +-1")));
    }
    Ok((cover, map.data().iter().map(|&v| v > 0).collect()))
}
