//! 64-bit range coder with byte-wise renormalization and carry
//! propagation through a pending-byte counter.
//!
//! The coding interval is kept at least `2^56` wide, so the 16-bit
//! frequency split `range >> 16` never drops below `2^40` and the coding
//! loss per symbol is negligible.

use crate::coder::cdf::{QuantizedCdf, PROB_BITS};
use crate::error::{Error, Result};

const TOP: u64 = 1 << 56;
const WINDOW: u128 = u64::MAX as u128;

pub struct RangeEncoder {
    /// 64-bit window plus a carry bit at position 64.
    low: u128,
    range: u64,
    cache: u8,
    pending: u64,
    /// The first byte out of the cache is always zero and is not stored.
    skipped_lead: bool,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self { low: 0, range: u64::MAX, cache: 0, pending: 1, skipped_lead: false, out: Vec::new() }
    }

    /// Narrows to `[start, start + freq)` out of `2^16`.
    pub fn encode(&mut self, start: u32, freq: u32) {
        debug_assert!(freq > 0 && start + freq <= 1 << PROB_BITS);
        let r = self.range >> PROB_BITS;
        self.low += u128::from(r * u64::from(start));
        self.range = r * u64::from(freq);
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn encode_symbol(&mut self, cdf: &QuantizedCdf, symbol: usize) -> Result<()> {
        let (start, freq) = cdf.interval(symbol)?;
        self.encode(start, freq);
        Ok(())
    }

    /// Sixteen uniformly distributed bits.
    pub fn encode_raw16(&mut self, value: u16) {
        self.encode(u32::from(value), 1);
    }

    fn emit(&mut self, byte: u8) {
        if self.skipped_lead {
            self.out.push(byte);
        } else {
            self.skipped_lead = true;
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u64) < 0xFF00_0000_0000_0000 || self.low > WINDOW {
            let carry = (self.low >> 64) as u8;
            let mut byte = self.cache;
            loop {
                self.emit(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 56) as u8;
        }
        self.pending += 1;
        self.low = (self.low << 8) & WINDOW;
    }

    /// Flushes the shortest tail that identifies the final interval; the
    /// decoder reads zeros past the end.
    pub fn finish(mut self) -> Vec<u8> {
        let step = u128::from(TOP);
        let v = (self.low + step - 1) & !(step - 1);
        debug_assert!(v < self.low + u128::from(self.range));
        self.low = v;
        self.shift_low();
        self.shift_low();
        while self.out.last() == Some(&0) {
            self.out.pop();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    code: u64,
    range: u64,
    data: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        let mut d = Self { code: 0, range: u64::MAX, data, pos: 0 };
        for _ in 0..8 {
            d.code = (d.code << 8) | u64::from(d.next_byte());
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Bytes of the payload consumed so far, excluding implicit zeros.
    pub fn consumed(&self) -> usize {
        self.pos.min(self.data.len())
    }

    fn target(&mut self) -> Result<(u64, u32)> {
        let r = self.range >> PROB_BITS;
        let v = self.code / r;
        if v >= 1 << PROB_BITS {
            return Err(Error::Corrupt("range decoder state out of bounds".into()));
        }
        Ok((r, v as u32))
    }

    fn consume(&mut self, r: u64, start: u32, freq: u32) {
        self.code -= r * u64::from(start);
        self.range = r * u64::from(freq);
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | u64::from(self.next_byte());
        }
    }

    pub fn decode_symbol(&mut self, cdf: &QuantizedCdf) -> Result<usize> {
        let (r, v) = self.target()?;
        let symbol = cdf.symbol_at(v);
        let (start, freq) = cdf.interval(symbol)?;
        self.consume(r, start, freq);
        Ok(symbol)
    }

    pub fn decode_raw16(&mut self) -> Result<u16> {
        let (r, v) = self.target()?;
        self.consume(r, v, 1);
        Ok(v as u16)
    }
}

/// Codes `symbols[i]` with `cdfs[i]`.
pub fn encode_symbols(symbols: &[usize], cdfs: &[QuantizedCdf]) -> Result<Vec<u8>> {
    if symbols.len() != cdfs.len() {
        return Err(Error::InvalidArgument(format!("{} symbols for {} tables", symbols.len(), cdfs.len())));
    }
    let mut enc = RangeEncoder::new();
    for (&s, cdf) in symbols.iter().zip(cdfs) {
        enc.encode_symbol(cdf, s)?;
    }
    Ok(enc.finish())
}

pub fn decode_symbols(bytes: &[u8], cdfs: &[QuantizedCdf]) -> Result<Vec<usize>> {
    let mut dec = RangeDecoder::new(bytes);
    cdfs.iter().map(|cdf| dec.decode_symbol(cdf)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cdf(rng: &mut impl Rng) -> QuantizedCdf {
        let n = rng.random_range(2..40);
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.0f64..1.0).powi(4)).collect();
        QuantizedCdf::from_probabilities(&weights).unwrap()
    }

    #[test]
    fn uniform_quaternary_cost() {
        let cdf = QuantizedCdf::from_probabilities(&[1.0; 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let symbols: Vec<usize> = (0..100).map(|_| rng.random_range(0..4)).collect();
        let cdfs = vec![cdf; 100];
        let bytes = encode_symbols(&symbols, &cdfs).unwrap();
        assert!(bytes.len() * 8 <= 200 + 32, "{} bytes", bytes.len());
        assert_eq!(decode_symbols(&bytes, &cdfs).unwrap(), symbols);
    }

    #[test]
    fn empty_sequence() {
        let bytes = encode_symbols(&[], &[]).unwrap();
        assert!(bytes.is_empty());
        assert!(decode_symbols(&bytes, &[]).unwrap().is_empty());
    }

    #[test]
    fn long_random_roundtrip_and_cost() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let tables: Vec<QuantizedCdf> = (0..64).map(|_| random_cdf(&mut rng)).collect();
        let mut cdfs = Vec::with_capacity(n);
        let mut symbols = Vec::with_capacity(n);
        let mut ideal = 0.0;
        for _ in 0..n {
            let cdf = tables[rng.random_range(0..tables.len())].clone();
            // Sample from the table itself so every probability class occurs.
            let v = rng.random_range(0..1u32 << PROB_BITS);
            let s = cdf.symbol_at(v);
            ideal += cdf.bits(s);
            symbols.push(s);
            cdfs.push(cdf);
        }
        let bytes = encode_symbols(&symbols, &cdfs).unwrap();
        assert_eq!(decode_symbols(&bytes, &cdfs).unwrap(), symbols);
        assert!((bytes.len() * 8) as f64 <= ideal + 32.0, "{} vs {ideal}", bytes.len() * 8);
    }

    #[test]
    fn carries_through_runs_of_ff() {
        // Always coding the top symbol of a skewed table drives low towards
        // the top of the window and exercises carry propagation.
        let cdf = QuantizedCdf::from_probabilities(&[1.0, 1e-4]).unwrap();
        for n in [1, 7, 64, 1000] {
            for pattern in 0..3 {
                let symbols: Vec<usize> = (0..n).map(|i| usize::from(pattern == 0 || i % (pattern + 1) == 0)).collect();
                let cdfs = vec![cdf.clone(); n];
                let bytes = encode_symbols(&symbols, &cdfs).unwrap();
                assert_eq!(decode_symbols(&bytes, &cdfs).unwrap(), symbols);
            }
        }
    }

    #[test]
    fn raw_values() {
        let mut enc = RangeEncoder::new();
        let cdf = QuantizedCdf::from_probabilities(&[3.0, 1.0]).unwrap();
        for v in [0u16, 1, 0x7FFF, 0xFFFF, 12345] {
            enc.encode_raw16(v);
            enc.encode_symbol(&cdf, 1).unwrap();
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes);
        for v in [0u16, 1, 0x7FFF, 0xFFFF, 12345] {
            assert_eq!(dec.decode_raw16().unwrap(), v);
            assert_eq!(dec.decode_symbol(&cdf).unwrap(), 1);
        }
    }

    #[test]
    fn out_of_support_symbol_is_an_error() {
        let cdf = QuantizedCdf::from_probabilities(&[1.0, 1.0]).unwrap();
        assert!(encode_symbols(&[2], &[cdf]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(seed in any::<u64>(), n in 0usize..400) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cdfs: Vec<QuantizedCdf> = (0..n).map(|_| random_cdf(&mut rng)).collect();
            let symbols: Vec<usize> = cdfs.iter().map(|c| rng.random_range(0..c.symbols())).collect();
            let bytes = encode_symbols(&symbols, &cdfs).unwrap();
            prop_assert_eq!(decode_symbols(&bytes, &cdfs).unwrap(), symbols);
        }
    }
}
