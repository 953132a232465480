//! Byte-oriented range coder with carry propagation: 32-bit range, 64-bit
//! low register, symbol frequencies summing to `2^PRECISION`.

use crate::error::{Error, Result};

pub const PRECISION: u32 = 16;
const TOP: u32 = 1 << 24;

#[derive(Debug)]
pub struct Encoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    out: Vec<u8>,
}

impl Default for Encoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Encoder {
    pub fn new() -> Self {
        Self { low: 0, range: u32::MAX, cache: 0, pending: 1, out: Vec::new() }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut b = self.cache;
            loop {
                self.out.push(b.wrapping_add(carry));
                b = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn normalize(&mut self) {
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// Codes the interval `[cum, cum + freq)` out of `2^PRECISION`.
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= 1 << PRECISION);
        let r = self.range >> PRECISION;
        self.low += r as u64 * cum as u64;
        self.range = r * freq;
        self.normalize();
    }

    /// Codes `bits` (at most 16) equiprobable bits.
    pub fn encode_bits(&mut self, value: u32, bits: u32) {
        debug_assert!(bits <= 16 && value < 1 << bits);
        let r = self.range >> bits;
        self.low += r as u64 * value as u64;
        self.range = r;
        self.normalize();
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug)]
pub struct Decoder<'a> {
    code: u32,
    range: u32,
    data: &'a [u8],
    pos: usize,
}

/// Bytes the decoder may read past the end of a well-formed stream.
const SLACK: usize = 4;

impl<'a> Decoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        let mut d = Self { code: 0, range: u32::MAX, data, pos: 0 };
        for _ in 0..5 {
            d.code = (d.code << 8) | d.byte()? as u32;
        }
        Ok(d)
    }

    fn byte(&mut self) -> Result<u8> {
        let b = self.data.get(self.pos).copied();
        self.pos += 1;
        match b {
            Some(b) => Ok(b),
            None if self.pos <= self.data.len() + SLACK => Ok(0),
            None => Err(Error::data(format!("coded stream overrun at offset {}", self.data.len()))),
        }
    }

    fn normalize(&mut self) -> Result<()> {
        while self.range < TOP {
            self.code = (self.code << 8) | self.byte()? as u32;
            self.range <<= 8;
        }
        Ok(())
    }

    /// Position of the next unread byte.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Target value in `[0, 2^PRECISION)`; follow with [`Decoder::consume`].
    pub fn peek(&mut self) -> Result<(u32, u32)> {
        let r = self.range >> PRECISION;
        let v = self.code / r;
        if v >= 1 << PRECISION {
            return Err(Error::data(format!("corrupt coded data near offset {}", self.pos.min(self.data.len()))));
        }
        Ok((v, r))
    }

    pub fn consume(&mut self, r: u32, cum: u32, freq: u32) -> Result<()> {
        self.code -= r * cum;
        self.range = r * freq;
        self.normalize()
    }

    pub fn decode_bits(&mut self, bits: u32) -> Result<u32> {
        let r = self.range >> bits;
        let v = self.code / r;
        if v >= 1 << bits {
            return Err(Error::data(format!("corrupt coded data near offset {}", self.pos.min(self.data.len()))));
        }
        self.code -= r * v;
        self.range = r;
        self.normalize()?;
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trips_mixed_symbols_and_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // three-symbol alphabet with skewed frequencies
        let freqs = [60000u32, 5000, 536];
        let cums = [0u32, 60000, 65000];
        let syms: Vec<(usize, u32)> =
            (0..20000).map(|_| (rng.gen_range(0..3), rng.gen_range(0..1 << 7))).collect();
        let mut e = Encoder::new();
        for &(s, b) in &syms {
            e.encode(cums[s], freqs[s]);
            e.encode_bits(b, 7);
        }
        let bytes = e.finish();
        let mut d = Decoder::new(&bytes).unwrap();
        for &(s, b) in &syms {
            let (v, r) = d.peek().unwrap();
            let got = cums.iter().rposition(|&c| c <= v).unwrap();
            assert_eq!(got, s);
            d.consume(r, cums[got], freqs[got]).unwrap();
            assert_eq!(d.decode_bits(7).unwrap(), b);
        }
    }

    #[test]
    fn carries_propagate() {
        // long runs of the top symbol drive low towards overflow
        let mut e = Encoder::new();
        let n = 50000;
        for i in 0..n {
            if i % 1000 == 999 {
                e.encode(0, 1);
            } else {
                e.encode(1, 65535);
            }
        }
        let bytes = e.finish();
        let mut d = Decoder::new(&bytes).unwrap();
        for i in 0..n {
            let (v, r) = d.peek().unwrap();
            let s = if v >= 1 { 1 } else { 0 };
            assert_eq!(s, if i % 1000 == 999 { 0 } else { 1 }, "symbol {i}");
            if s == 1 {
                d.consume(r, 1, 65535).unwrap();
            } else {
                d.consume(r, 0, 1).unwrap();
            }
        }
    }
}
