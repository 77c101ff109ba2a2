//! Reversible data hiding by rhombus-predicted prediction-error expansion.
//!
//! Layout of an embedded image `[C,H,W]`:
//!
//! - rows `0..R` of channel 0 hold, by LSB substitution in raster order, the
//!   header `[C-1 (2), T (8), R, N, n1, lm_len]` (last four `w` bits wide,
//!   `w = bit_length(C*H*W)`) followed by `lm_len` location-map bits;
//! - rows `R+1..H-1`, columns `1..W-1` of every channel are targets, split
//!   into a cross set (`i+j` even, pass 1) and a dot set (`i+j` odd, pass 2);
//! - row `R`, the last row and the edge columns are never modified.
//!
//! The embedded stream is `[original LSBs of the header pixels | CRC-32 of
//! host and payload | payload]`; pass 1 carries its first `n1` bits. A target
//! with error `e = x - pred` is expanded to `2e + b` when `|e| <= T`, shifted
//! outward by `T + 1` otherwise, and skipped when either would leave [0,255].
//! The location map holds one flag per processed pixel whose final value
//! would itself be skipped (1 = skipped, 0 = modified), dot flags first.

use crate::codec::arith::{ArithDecoder, ArithEncoder, BinModel};
use crate::codec::{pack_bits, push_bits, read_bits, Bitstream};
use crate::error::{shape_err, Error, Result};
use crate::numerics::IntTensor;

/// Location-map flags share one adaptive context per block of this many flags.
const LM_BLOCK: usize = 4096;
const CRC_BITS: usize = 32;

/// Diagnostics of a successful embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct RdhEmbedding {
    pub image: IntTensor,
    pub threshold: u8,
    pub header_rows: usize,
    /// Stream bits carried by the cross pass.
    pub pass1_bits: usize,
    pub location_map_bits: usize,
    pub stream_bits: usize,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    c: usize,
    h: usize,
    w: usize,
    field: usize,
}

impl Layout {
    fn of(img: &IntTensor) -> Result<Self> {
        let (c, h, w) = match img.shape() {
            &[c, h, w] => (c, h, w),
            s => return Err(shape_err(format!("expected [C,H,W], got {s:?}"))),
        };
        if !(1..=4).contains(&c) || h < 4 || w < 3 {
            return Err(Error::BadParams(format!("image {c}x{h}x{w} too small for embedding")));
        }
        Ok(Layout {
            c,
            h,
            w,
            field: bit_length(c * h * w),
        })
    }

    fn header_bits(&self) -> usize {
        2 + 8 + 4 * self.field
    }

    fn min_rows(&self) -> usize {
        self.header_bits().div_ceil(self.w).max(1)
    }

    fn max_rows(&self) -> usize {
        self.h - 3
    }

    /// Flat indices of one pass, channel-major then raster order.
    fn targets(&self, rows: usize, parity: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for ch in 0..self.c {
            for i in rows + 1..self.h - 1 {
                let first = if (i + 1) % 2 == parity { 1 } else { 2 };
                for j in (first..self.w - 1).step_by(2) {
                    out.push((ch * self.h + i) * self.w + j);
                }
            }
        }
        out
    }
}

fn bit_length(v: usize) -> usize {
    (usize::BITS - v.leading_zeros()) as usize
}

#[inline]
fn predict(px: &[i64], w: usize, idx: usize) -> i64 {
    (px[idx - w] + px[idx + w] + px[idx - 1] + px[idx + 1]).div_euclid(4)
}

/// Floor of the mean of the four axial neighbours of `(i, j)` in channel `c`.
pub fn rhombus_predict(img: &IntTensor, c: usize, i: usize, j: usize) -> Result<i64> {
    let (_, h, w) = match img.shape() {
        &[ch, h, w] if c < ch => (ch, h, w),
        s => return Err(shape_err(format!("channel {c} outside {s:?}"))),
    };
    if i == 0 || j == 0 || i + 1 >= h || j + 1 >= w {
        return Err(Error::BadParams(format!("({i}, {j}) has no full neighbourhood")));
    }
    Ok(predict(img.data(), w, (c * h + i) * w + j))
}

/// True when expanding (either bit) or shifting `x` would leave [0,255].
pub fn would_overflow(x: i64, p: i64, t: i64) -> bool {
    let e = x - p;
    if e.abs() <= t {
        p + 2 * e < 0 || p + 2 * e + 1 > 255
    } else if e > t {
        x + t + 1 > 255
    } else {
        x - t < 0
    }
}

fn expandable(x: i64, p: i64, t: i64) -> bool {
    (x - p).abs() <= t && !would_overflow(x, p, t)
}

/// Could this pixel end up needing a location-map flag, whatever bit it carries?
fn may_need_flag(x: i64, p: i64, t: i64) -> bool {
    if would_overflow(x, p, t) {
        return true;
    }
    let e = x - p;
    if e.abs() <= t {
        would_overflow(p + 2 * e, p, t) || would_overflow(p + 2 * e + 1, p, t)
    } else if e > t {
        would_overflow(x + t + 1, p, t)
    } else {
        would_overflow(x - t, p, t)
    }
}

/// Worst-case coded length of `flags` location-map flags.
fn lm_bound(flags: usize) -> usize {
    flags + 14 * flags.div_ceil(LM_BLOCK) + 4
}

fn encode_lm(flags: &[bool]) -> Bitstream {
    let mut enc = ArithEncoder::new();
    for block in flags.chunks(LM_BLOCK) {
        let mut model = BinModel::new();
        for &f in block {
            enc.encode(f, &mut model);
        }
    }
    enc.finish()
}

struct LmReader<'a> {
    dec: ArithDecoder<'a>,
    model: BinModel,
    read: usize,
}

impl LmReader<'_> {
    fn next(&mut self) -> Result<bool> {
        if self.read > 0 && self.read % LM_BLOCK == 0 {
            self.model = BinModel::new();
        }
        self.read += 1;
        self.dec.decode(&mut self.model)
    }
}

/// Embeds `bits` along `targets`, stopping right after the last bit.
/// Returns how many bits went in; flags are appended in processing order.
fn embed_pass(px: &mut [i64], w: usize, targets: &[usize], t: i64, bits: &[bool], flags: &mut Vec<bool>) -> usize {
    let mut k = 0;
    if bits.is_empty() {
        return 0;
    }
    for &idx in targets {
        let x = px[idx];
        let p = predict(px, w, idx);
        if would_overflow(x, p, t) {
            flags.push(true);
            continue;
        }
        let e = x - p;
        let xn = if e.abs() <= t {
            let v = p + 2 * e + bits[k] as i64;
            k += 1;
            v
        } else if e > t {
            x + t + 1
        } else {
            x - t
        };
        px[idx] = xn;
        if would_overflow(xn, p, t) {
            flags.push(false);
        }
        if k == bits.len() {
            break;
        }
    }
    k
}

fn restore_pass(px: &mut [i64], w: usize, targets: &[usize], t: i64, n: usize, lm: &mut LmReader) -> Result<Bitstream> {
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return Ok(out);
    }
    for &idx in targets {
        let x = px[idx];
        let p = predict(px, w, idx);
        if would_overflow(x, p, t) && lm.next()? {
            continue;
        }
        let e = x - p;
        let orig = if (-2 * t..=2 * t + 1).contains(&e) {
            out.push(e.rem_euclid(2) == 1);
            p + e.div_euclid(2)
        } else if e > 2 * t + 1 {
            x - t - 1
        } else {
            x + t
        };
        if !(0..=255).contains(&orig) {
            return Err(Error::MalformedHeader(format!("restored pixel {orig} out of range")));
        }
        px[idx] = orig;
        if out.len() == n {
            return Ok(out);
        }
    }
    Err(Error::MalformedHeader(
        "stream longer than the embedding positions".into(),
    ))
}

fn host_crc(host: &[i64], payload: &[bool]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(&host.iter().map(|&v| v as u8).collect::<Vec<u8>>());
    h.update(&(payload.len() as u64).to_le_bytes());
    h.update(&pack_bits(payload));
    h.finalize()
}

fn check_pixels(img: &IntTensor) -> Result<()> {
    if let Some(&v) = img.data().iter().find(|v| !(0..=255).contains(*v)) {
        return Err(Error::BadParams(format!("pixel {v} outside [0,255]")));
    }
    Ok(())
}

/// Embedding at a fixed threshold and header height.
fn embed_with(img: &IntTensor, payload: &[bool], t: u8, rows: usize) -> Result<RdhEmbedding> {
    let lay = Layout::of(img)?;
    if rows < lay.min_rows() || rows > lay.max_rows() {
        return Err(Error::BadParams(format!("header rows {rows} out of range")));
    }
    if payload.len() >= 1 << lay.field {
        return Err(Error::CapacityExceeded {
            required: payload.len(),
            available: (1 << lay.field) - 1,
        });
    }
    let ti = t as i64;
    let hdr = lay.header_bits();
    let region = rows * lay.w;
    let cross = lay.targets(rows, 0);
    let dot = lay.targets(rows, 1);
    let src = img.data();
    let cap1 = cross
        .iter()
        .filter(|&&i| expandable(src[i], predict(src, lay.w, i), ti))
        .count();
    let crc = host_crc(src, payload);

    let mut budget = 0;
    loop {
        // the location map alone overflows the header rows
        if hdr + budget > region {
            return Err(Error::CapacityExceeded {
                required: payload.len(),
                available: 0,
            });
        }
        let mut stream: Bitstream = src[..hdr + budget].iter().map(|v| v & 1 == 1).collect();
        push_bits(&mut stream, crc as u64, CRC_BITS);
        stream.extend_from_slice(payload);

        let n1 = stream.len().min(cap1);
        let mut px = src.to_vec();
        let (mut flags1, mut flags2) = (Vec::new(), Vec::new());
        let got1 = embed_pass(&mut px, lay.w, &cross, ti, &stream[..n1], &mut flags1);
        debug_assert_eq!(got1, n1);
        let got2 = embed_pass(&mut px, lay.w, &dot, ti, &stream[n1..], &mut flags2);
        if got2 < stream.len() - n1 {
            return Err(Error::CapacityExceeded {
                required: payload.len(),
                available: (n1 + got2).saturating_sub(hdr + budget + CRC_BITS),
            });
        }
        flags2.extend(flags1);
        let mut lm = encode_lm(&flags2);
        if lm.len() > budget {
            budget = lm.len();
            continue;
        }
        lm.resize(budget, false);

        let mut side = Vec::with_capacity(hdr + budget);
        push_bits(&mut side, (lay.c - 1) as u64, 2);
        push_bits(&mut side, t as u64, 8);
        for v in [rows, payload.len(), n1, budget] {
            push_bits(&mut side, v as u64, lay.field);
        }
        side.extend(lm);
        for (p, &b) in px.iter_mut().zip(&side) {
            *p = (*p & !1) | b as i64;
        }
        return Ok(RdhEmbedding {
            image: IntTensor::new(img.shape().to_vec(), px)?,
            threshold: t,
            header_rows: rows,
            pass1_bits: n1,
            location_map_bits: budget,
            stream_bits: stream.len(),
        });
    }
}

/// Embeds `payload`, choosing the smallest threshold (then header height)
/// that fits.
pub fn pee_embed(img: &IntTensor, payload: &[bool]) -> Result<RdhEmbedding> {
    check_pixels(img)?;
    let lay = Layout::of(img)?;
    let need = lay.header_bits() + CRC_BITS + payload.len();
    let mut best = 0;
    for t in 0..=u8::MAX {
        let counts = RowCounts::new(img, &lay, t as i64);
        for rows in lay.min_rows()..=lay.max_rows() {
            // even every target expanding cannot carry the stream
            if counts.cap1(rows) + counts.dot_targets(rows) < need {
                break;
            }
            match embed_with(img, payload, t, rows) {
                Ok(e) => return Ok(e),
                Err(Error::CapacityExceeded { available, .. }) => best = best.max(available),
                Err(e) => return Err(e),
            }
        }
    }
    Err(Error::CapacityExceeded {
        required: payload.len(),
        available: best,
    })
}

/// Recovers the host image and payload, then re-embeds to confirm the input
/// is exactly what [`pee_embed`] would have produced.
pub fn pee_extract_restore(stego: &IntTensor) -> Result<(IntTensor, Bitstream)> {
    check_pixels(stego)?;
    let lay = Layout::of(stego)?;
    let px_in = stego.data();
    let lsb: Vec<bool> = px_in[..lay.h * lay.w].iter().map(|v| v & 1 == 1).collect();
    let mut pos = 0;
    let mut field = |w: usize| read_bits(&lsb, &mut pos, w).ok_or(Error::TruncatedStream);
    let channels = field(2)? as usize + 1;
    let t = field(8)? as u8;
    let rows = field(lay.field)? as usize;
    let n = field(lay.field)? as usize;
    let n1 = field(lay.field)? as usize;
    let lm_len = field(lay.field)? as usize;
    let hdr = lay.header_bits();
    if channels != lay.c {
        return Err(Error::MalformedHeader(format!("header claims {channels} channels")));
    }
    if rows < lay.min_rows() || rows > lay.max_rows() || hdr + lm_len > rows * lay.w {
        return Err(Error::MalformedHeader(format!(
            "header rows {rows} / map {lm_len} invalid"
        )));
    }
    let stream_len = hdr + lm_len + CRC_BITS + n;
    if n1 > stream_len {
        return Err(Error::MalformedHeader("pass split beyond stream".into()));
    }

    let lm_bits = &lsb[hdr..hdr + lm_len];
    let mut lm = LmReader {
        dec: ArithDecoder::new(lm_bits)?,
        model: BinModel::new(),
        read: 0,
    };
    let mut px = px_in.to_vec();
    let ti = t as i64;
    let bits2 = restore_pass(&mut px, lay.w, &lay.targets(rows, 1), ti, stream_len - n1, &mut lm)?;
    let mut stream = restore_pass(&mut px, lay.w, &lay.targets(rows, 0), ti, n1, &mut lm)?;
    stream.extend(bits2);

    for (p, &b) in px.iter_mut().zip(&stream[..hdr + lm_len]) {
        *p = (*p & !1) | b as i64;
    }
    let mut cpos = hdr + lm_len;
    let stored = read_bits(&stream, &mut cpos, CRC_BITS).ok_or(Error::TruncatedStream)? as u32;
    let payload = stream[cpos..].to_vec();
    let computed = host_crc(&px, &payload);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    let host = IntTensor::new(stego.shape().to_vec(), px)?;
    let again = embed_with(&host, &payload, t, rows)?;
    if again.image != *stego {
        return Err(Error::MalformedHeader("stego differs from its own re-embedding".into()));
    }
    Ok((host, payload))
}

/// Per-row target statistics at one threshold, for every header height at once.
struct RowCounts {
    /// Suffix sums over rows: entry `i` counts rows `i..H-1`.
    expandable_cross: Vec<usize>,
    flaggable_cross: Vec<usize>,
    dot: Vec<usize>,
}

impl RowCounts {
    fn new(img: &IntTensor, lay: &Layout, t: i64) -> Self {
        let px = img.data();
        let mut exp = vec![0; lay.h + 1];
        let mut flag = vec![0; lay.h + 1];
        let mut dot = vec![0; lay.h + 1];
        for ch in 0..lay.c {
            for i in 1..lay.h - 1 {
                for j in 1..lay.w - 1 {
                    if (i + j) % 2 == 1 {
                        dot[i] += 1;
                        continue;
                    }
                    let idx = (ch * lay.h + i) * lay.w + j;
                    let (x, p) = (px[idx], predict(px, lay.w, idx));
                    exp[i] += expandable(x, p, t) as usize;
                    flag[i] += may_need_flag(x, p, t) as usize;
                }
            }
        }
        for v in [&mut exp, &mut flag, &mut dot] {
            for i in (0..lay.h).rev() {
                v[i] += v[i + 1];
            }
        }
        RowCounts {
            expandable_cross: exp,
            flaggable_cross: flag,
            dot,
        }
    }

    fn cap1(&self, rows: usize) -> usize {
        self.expandable_cross[rows + 1]
    }

    fn flags(&self, rows: usize) -> usize {
        self.flaggable_cross[rows + 1]
    }

    fn dot_targets(&self, rows: usize) -> usize {
        self.dot[rows + 1]
    }
}

/// Payload bits that are guaranteed to fit at threshold `t`: the cross-pass
/// capacity minus the header, checksum and worst-case location map, for the
/// best header height. Zero also when not even an empty payload fits.
pub fn capacity(img: &IntTensor, t: u8) -> Result<usize> {
    let lay = Layout::of(img)?;
    let counts = RowCounts::new(img, &lay, t as i64);
    let hdr = lay.header_bits();
    let mut best = 0;
    for rows in lay.min_rows()..=lay.max_rows() {
        let lm = lm_bound(counts.flags(rows));
        if hdr + lm > rows * lay.w {
            continue;
        }
        best = best.max(counts.cap1(rows).saturating_sub(hdr + lm + CRC_BITS));
    }
    Ok(best.min((1 << lay.field) - 1))
}

/// Targets (both passes, smallest header) whose error is expandable at `t`,
/// predicted on the unmodified image.
pub fn expandable_count(img: &IntTensor, t: u8) -> Result<usize> {
    let lay = Layout::of(img)?;
    let px = img.data();
    let rows = lay.min_rows();
    Ok([0, 1]
        .iter()
        .flat_map(|&par| lay.targets(rows, par))
        .filter(|&i| expandable(px[i], predict(px, lay.w, i), t as i64))
        .count())
}
