//! Binary arithmetic coder with 32-bit registers.
//!
//! Interval renormalization follows the classic integer scheme: emit a bit
//! when the interval sits in one half, defer it (pending bits) when the
//! interval straddles the midpoint inside the middle half.

use crate::error::{Error, Result};

const PRECISION: u32 = 32;
const TOP: u64 = (1 << PRECISION) - 1;
const HALF: u64 = 1 << (PRECISION - 1);
const QUARTER: u64 = 1 << (PRECISION - 2);
const THREE_QUARTERS: u64 = HALF + QUARTER;

/// Counts above this total are halved.
const RESCALE_LIMIT: u32 = 1 << 16;

/// Adaptive probability estimate for one binary context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinModel {
    c0: u32,
    c1: u32,
}

impl Default for BinModel {
    fn default() -> Self {
        BinModel { c0: 1, c1: 1 }
    }
}

impl BinModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn counts(&self) -> (u32, u32) {
        (self.c0, self.c1)
    }

    pub fn p_zero(&self) -> f64 {
        self.c0 as f64 / (self.c0 + self.c1) as f64
    }

    pub fn update(&mut self, bit: bool) {
        if bit {
            self.c1 += 1;
        } else {
            self.c0 += 1;
        }
        if self.c0 + self.c1 > RESCALE_LIMIT {
            self.c0 = self.c0.div_ceil(2).max(1);
            self.c1 = self.c1.div_ceil(2).max(1);
        }
    }

    /// Last value of the zero sub-interval `[low, split]`.
    fn split(&self, low: u64, high: u64) -> u64 {
        let range = high - low + 1;
        low + range * self.c0 as u64 / (self.c0 + self.c1) as u64 - 1
    }
}

#[derive(Debug)]
pub struct ArithEncoder {
    low: u64,
    high: u64,
    pending: u64,
    out: Vec<bool>,
}

impl Default for ArithEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl ArithEncoder {
    pub fn new() -> Self {
        ArithEncoder {
            low: 0,
            high: TOP,
            pending: 0,
            out: Vec::new(),
        }
    }

    fn emit(&mut self, bit: bool) {
        self.out.push(bit);
        for _ in 0..self.pending {
            self.out.push(!bit);
        }
        self.pending = 0;
    }

    /// Codes one bit under `model`, then adapts the model.
    pub fn encode(&mut self, bit: bool, model: &mut BinModel) {
        let split = model.split(self.low, self.high);
        if bit {
            self.low = split + 1;
        } else {
            self.high = split;
        }
        model.update(bit);
        loop {
            if self.high < HALF {
                self.emit(false);
            } else if self.low >= HALF {
                self.emit(true);
                self.low -= HALF;
                self.high -= HALF;
            } else if self.low >= QUARTER && self.high < THREE_QUARTERS {
                self.pending += 1;
                self.low -= QUARTER;
                self.high -= QUARTER;
            } else {
                break;
            }
            self.low <<= 1;
            self.high = self.high << 1 | 1;
        }
    }

    /// Emits two disambiguating bits (plus pending ones) and returns the stream.
    pub fn finish(mut self) -> Vec<bool> {
        self.pending += 1;
        let bit = self.low >= QUARTER;
        self.emit(bit);
        self.out
    }

    pub fn bits_written(&self) -> usize {
        self.out.len()
    }
}

#[derive(Debug)]
pub struct ArithDecoder<'a> {
    bits: &'a [bool],
    pos: usize,
    low: u64,
    high: u64,
    value: u64,
}

impl<'a> ArithDecoder<'a> {
    pub fn new(bits: &'a [bool]) -> Result<Self> {
        let mut d = ArithDecoder {
            bits,
            pos: 0,
            low: 0,
            high: TOP,
            value: 0,
        };
        for _ in 0..PRECISION {
            d.value = d.value << 1 | d.next_bit()? as u64;
        }
        Ok(d)
    }

    /// Bits past the end read as zero, up to one register's worth.
    fn next_bit(&mut self) -> Result<bool> {
        let b = self.bits.get(self.pos).copied().unwrap_or(false);
        self.pos += 1;
        if self.pos > self.bits.len() + PRECISION as usize {
            return Err(Error::TruncatedStream);
        }
        Ok(b)
    }

    pub fn decode(&mut self, model: &mut BinModel) -> Result<bool> {
        let split = model.split(self.low, self.high);
        let bit = self.value > split;
        if bit {
            self.low = split + 1;
        } else {
            self.high = split;
        }
        model.update(bit);
        loop {
            if self.low >= HALF {
                self.low -= HALF;
                self.high -= HALF;
                self.value -= HALF;
            } else if self.low >= QUARTER && self.high < THREE_QUARTERS {
                self.low -= QUARTER;
                self.high -= QUARTER;
                self.value -= QUARTER;
            } else if self.high >= HALF {
                break;
            }
            self.low <<= 1;
            self.high = self.high << 1 | 1;
            self.value = self.value << 1 | self.next_bit()? as u64;
        }
        Ok(bit)
    }
}

/// Codes a bit sequence with a single adaptive context.
pub fn ac_encode(symbols: &[bool], model: &mut BinModel) -> Vec<bool> {
    let mut enc = ArithEncoder::new();
    for &s in symbols {
        enc.encode(s, model);
    }
    enc.finish()
}

pub fn ac_decode(bits: &[bool], n: usize, model: &mut BinModel) -> Result<Vec<bool>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut dec = ArithDecoder::new(bits)?;
    (0..n).map(|_| dec.decode(model)).collect()
}
