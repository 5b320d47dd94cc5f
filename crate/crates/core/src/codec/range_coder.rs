//! 32-bit carry-less range coder with 16-bit probabilities.

use crate::error::{Error, Result};

pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;
const TOP: u32 = 1 << 24;
const BOT: u32 = 1 << 16;

/// Cumulative frequencies over the contiguous symbol range
/// `[min_symbol, min_symbol + len)`; `cdf[0] == 0`, `cdf[len] == 2^16`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreqTable {
    min_symbol: i32,
    cdf: Vec<u32>,
}

impl FreqTable {
    pub fn new(min_symbol: i32, cdf: Vec<u32>) -> Result<Self> {
        if cdf.len() < 2 || cdf[0] != 0 || *cdf.last().unwrap() != PROB_TOTAL {
            return Err(Error::Model(format!(
                "CDF must run from 0 to {PROB_TOTAL} over at least one symbol"
            )));
        }
        if cdf.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Model("CDF is not strictly increasing".into()));
        }
        Ok(FreqTable { min_symbol, cdf })
    }

    pub fn from_freqs(min_symbol: i32, freqs: &[u32]) -> Result<Self> {
        let mut cdf = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u32;
        cdf.push(0);
        for &f in freqs {
            acc = acc
                .checked_add(f)
                .ok_or_else(|| Error::Model("frequency overflow".into()))?;
            cdf.push(acc);
        }
        Self::new(min_symbol, cdf)
    }

    pub fn min_symbol(&self) -> i32 {
        self.min_symbol
    }

    pub fn max_symbol(&self) -> i32 {
        self.min_symbol + self.cdf.len() as i32 - 2
    }

    pub fn cdf(&self) -> &[u32] {
        &self.cdf
    }

    /// `(cumulative, frequency)` of a symbol.
    pub fn interval(&self, symbol: i32) -> Result<(u32, u32)> {
        if symbol < self.min_symbol || symbol > self.max_symbol() {
            return Err(Error::SymbolRange { symbol });
        }
        let i = (symbol - self.min_symbol) as usize;
        Ok((self.cdf[i], self.cdf[i + 1] - self.cdf[i]))
    }

    pub fn probability(&self, symbol: i32) -> Result<f64> {
        let (_, f) = self.interval(symbol)?;
        Ok(f as f64 / PROB_TOTAL as f64)
    }

    /// Symbol whose interval contains `target < 2^16`.
    fn lookup(&self, target: u32) -> (i32, u32, u32) {
        let i = self.cdf.partition_point(|&c| c <= target) - 1;
        (
            self.min_symbol + i as i32,
            self.cdf[i],
            self.cdf[i + 1] - self.cdf[i],
        )
    }
}

#[derive(Debug, Default)]
pub struct RangeEncoder {
    low: u32,
    range: u32,
    out: Vec<u8>,
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, symbol: i32, table: &FreqTable) -> Result<()> {
        let (cum, freq) = table.interval(symbol)?;
        self.range >>= PROB_BITS;
        self.low = self.low.wrapping_add(cum * self.range);
        self.range *= freq;
        self.normalize();
        Ok(())
    }

    fn normalize(&mut self) {
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        self.out.extend_from_slice(&self.low.to_be_bytes());
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    low: u32,
    range: u32,
    code: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self> {
        if input.len() < 4 {
            return Err(Error::Desync("range-coded section shorter than 4 bytes"));
        }
        Ok(RangeDecoder {
            low: 0,
            range: u32::MAX,
            code: u32::from_be_bytes(input[..4].try_into().unwrap()),
            input,
            pos: 4,
        })
    }

    pub fn decode(&mut self, table: &FreqTable) -> Result<i32> {
        self.range >>= PROB_BITS;
        let target = self.code.wrapping_sub(self.low) / self.range;
        if target >= PROB_TOTAL {
            return Err(Error::Desync("cumulative frequency outside the table"));
        }
        let (symbol, cum, freq) = table.lookup(target);
        self.low = self.low.wrapping_add(cum * self.range);
        self.range *= freq;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            let byte = *self
                .input
                .get(self.pos)
                .ok_or(Error::Desync("read past the end of a range-coded section"))?;
            self.pos += 1;
            self.code = (self.code << 8) | byte as u32;
            self.low <<= 8;
            self.range <<= 8;
        }
        Ok(symbol)
    }

    /// True when every byte of the section has been consumed.
    pub fn exhausted(&self) -> bool {
        self.pos == self.input.len()
    }
}

/// Codes `symbols[i]` with `tables[index[i]]`.
pub fn range_encode(symbols: &[i32], index: &[usize], tables: &[FreqTable]) -> Result<Vec<u8>> {
    if symbols.len() != index.len() {
        return Err(Error::Bitstream("one table index per symbol required".into()));
    }
    let mut enc = RangeEncoder::new();
    for (&s, &t) in symbols.iter().zip(index) {
        let table = tables
            .get(t)
            .ok_or_else(|| Error::Bitstream(format!("no table {t}")))?;
        enc.encode(s, table)?;
    }
    Ok(enc.finish())
}

pub fn range_decode(bytes: &[u8], index: &[usize], tables: &[FreqTable]) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(index.len());
    for &t in index {
        let table = tables
            .get(t)
            .ok_or_else(|| Error::Bitstream(format!("no table {t}")))?;
        out.push(dec.decode(table)?);
    }
    if !dec.exhausted() {
        return Err(Error::Desync("trailing bytes after the last symbol"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn skewed_table() -> FreqTable {
        // geometric-ish over [-8, 8]
        let freqs: Vec<u32> = (-8i32..=8).map(|s| 1 + (4096 >> s.unsigned_abs().min(12))).collect();
        let total: u32 = freqs.iter().sum();
        let mut freqs: Vec<u32> = freqs.iter().map(|f| f * (PROB_TOTAL / 2) / total).map(|f| f.max(1)).collect();
        let rest = PROB_TOTAL - freqs.iter().sum::<u32>();
        freqs[8] += rest;
        FreqTable::from_freqs(-8, &freqs).unwrap()
    }

    #[test]
    fn empty_stream() {
        let t = skewed_table();
        let bytes = range_encode(&[], &[], std::slice::from_ref(&t)).unwrap();
        assert_eq!(bytes.len(), 4);
        assert!(range_decode(&bytes, &[], &[t]).unwrap().is_empty());
    }

    #[test]
    fn rejects_out_of_range_symbol() {
        let t = skewed_table();
        assert!(matches!(
            range_encode(&[9], &[0], &[t]),
            Err(Error::SymbolRange { symbol: 9 })
        ));
    }

    #[test]
    fn truncated_input_is_an_error() {
        let t = skewed_table();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let symbols: Vec<i32> = (0..2000).map(|_| rng.random_range(-8..=8)).collect();
        let index = vec![0; symbols.len()];
        let bytes = range_encode(&symbols, &index, std::slice::from_ref(&t)).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(range_decode(cut, &index, std::slice::from_ref(&t)).is_err());
        assert!(range_decode(&bytes[..2], &index, &[t]).is_err());
    }

    #[test]
    fn mixed_tables_round_trip() {
        let uniform = FreqTable::from_freqs(0, &[PROB_TOTAL / 4; 4]).unwrap();
        let tables = [skewed_table(), uniform];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let index: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..2)).collect();
        let symbols: Vec<i32> = index
            .iter()
            .map(|&t| if t == 0 { rng.random_range(-8..=8) } else { rng.random_range(0..4) })
            .collect();
        let bytes = range_encode(&symbols, &index, &tables).unwrap();
        assert_eq!(range_decode(&bytes, &index, &tables).unwrap(), symbols);
    }

    proptest! {
        #[test]
        fn round_trip(symbols in proptest::collection::vec(-8i32..=8, 0..3000)) {
            let t = skewed_table();
            let index = vec![0; symbols.len()];
            let bytes = range_encode(&symbols, &index, std::slice::from_ref(&t)).unwrap();
            prop_assert_eq!(range_decode(&bytes, &index, &[t]).unwrap(), symbols);
        }
    }
}
