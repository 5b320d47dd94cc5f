//! Scale-binned Gaussian frequency tables for the latent residuals.

use sha2::{Digest, Sha256};
use statrs::function::erf::erfc;

use super::range_coder::{FreqTable, PROB_TOTAL};
use crate::error::{Error, Result};

pub const SYMBOL_MIN: i32 = -255;
pub const SYMBOL_MAX: i32 = 255;
pub const NUM_SYMBOLS: usize = (SYMBOL_MAX - SYMBOL_MIN + 1) as usize;
pub const NUM_BINS: usize = 64;
pub const SIGMA_MIN: f64 = 0.11;
pub const SIGMA_MAX: f64 = 64.0;
/// Fractional bits of the stored bin edges.
pub const EDGE_FRAC_BITS: u32 = 16;

/// Centre of scale bin `i`, log-spaced from `SIGMA_MIN` to `SIGMA_MAX`.
pub fn bin_sigma(i: usize) -> f64 {
    SIGMA_MIN * (SIGMA_MAX / SIGMA_MIN).powf(i as f64 / (NUM_BINS - 1) as f64)
}

/// Probability of integer `s` under a zero-mean Gaussian of scale `sigma`,
/// truncated to the symbol range and renormalised.
pub fn gaussian_mass(s: i32, sigma: f64) -> f64 {
    let k = 1.0 / (sigma * std::f64::consts::SQRT_2);
    let a = s.unsigned_abs() as f64;
    let raw = if s == 0 {
        1.0 - erfc(0.5 * k)
    } else {
        0.5 * (erfc((a - 0.5) * k) - erfc((a + 0.5) * k))
    };
    let z = 1.0 - erfc((SYMBOL_MAX as f64 + 0.5) * k);
    raw / z
}

/// Integer frequencies with total `2^16`: every symbol gets `1 + floor(p * (2^16 - 511))`
/// and symbol 0 absorbs the remainder.
pub fn gaussian_freqs(sigma: f64) -> Result<Vec<u32>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Model(format!("degenerate scale {sigma}")));
    }
    let budget = (PROB_TOTAL - NUM_SYMBOLS as u32) as f64;
    let mut freqs: Vec<u32> = (SYMBOL_MIN..=SYMBOL_MAX)
        .map(|s| 1 + (gaussian_mass(s, sigma) * budget).floor() as u32)
        .collect();
    let used: u32 = freqs.iter().sum();
    let zero = (-SYMBOL_MIN) as usize;
    freqs[zero] += PROB_TOTAL
        .checked_sub(used)
        .ok_or_else(|| Error::Model("frequency budget exceeded".into()))?;
    Ok(freqs)
}

/// The frozen entropy model: bin edges in Q16 and one table per bin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntropyTables {
    edges: Vec<u32>,
    tables: Vec<FreqTable>,
}

impl EntropyTables {
    pub fn build() -> Result<Self> {
        let scale = (1u64 << EDGE_FRAC_BITS) as f64;
        let edges = (0..NUM_BINS - 1)
            .map(|i| ((bin_sigma(i) * bin_sigma(i + 1)).sqrt() * scale).round() as u32)
            .collect();
        let tables = (0..NUM_BINS)
            .map(|i| FreqTable::from_freqs(SYMBOL_MIN, &gaussian_freqs(bin_sigma(i))?))
            .collect::<Result<_>>()?;
        Ok(EntropyTables { edges, tables })
    }

    pub fn from_parts(edges: Vec<u32>, tables: Vec<FreqTable>) -> Result<Self> {
        if edges.len() + 1 != tables.len() || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Model("scale bin edges must increase, one fewer than tables".into()));
        }
        if tables
            .iter()
            .any(|t| t.min_symbol() != SYMBOL_MIN || t.max_symbol() != SYMBOL_MAX)
        {
            return Err(Error::Model(format!(
                "entropy tables must cover [{SYMBOL_MIN}, {SYMBOL_MAX}]"
            )));
        }
        Ok(EntropyTables { edges, tables })
    }

    pub fn edges(&self) -> &[u32] {
        &self.edges
    }

    pub fn tables(&self) -> &[FreqTable] {
        &self.tables
    }

    /// Table used for the hyper-latent.
    pub fn hyper_bin(&self) -> usize {
        self.tables.len() - 1
    }

    /// Bin of a fixed-point scale `v * 2^-a`; pure integer comparison.
    pub fn bin_fixed(&self, v: i32, a: u32) -> usize {
        let scaled = (v.max(0) as u64) << (EDGE_FRAC_BITS - a.min(EDGE_FRAC_BITS));
        self.edges.partition_point(|&e| e as u64 <= scaled)
    }

    /// Bin of a float scale, through the same Q16 comparison.
    pub fn bin_float(&self, sigma: f32) -> usize {
        let scaled = (sigma.max(0.0) as f64 * (1u64 << EDGE_FRAC_BITS) as f64).round();
        let scaled = if scaled.is_nan() { 0 } else { scaled as u64 };
        self.edges.partition_point(|&e| e as u64 <= scaled)
    }

    /// Serialized form: edges then every CDF, all u32 little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * (self.edges.len() + self.tables.len() * (NUM_SYMBOLS + 1)));
        for e in &self.edges {
            out.extend_from_slice(&e.to_le_bytes());
        }
        for t in &self.tables {
            for c in t.cdf() {
                out.extend_from_slice(&c.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], bins: usize) -> Result<Self> {
        let expect = 4 * ((bins - 1) + bins * (NUM_SYMBOLS + 1));
        if bins == 0 || bytes.len() != expect {
            return Err(Error::Model(format!(
                "entropy table section is {} bytes, expected {expect}",
                bytes.len()
            )));
        }
        let words: Vec<u32> = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (edges, cdfs) = words.split_at(bins - 1);
        let tables = cdfs
            .chunks_exact(NUM_SYMBOLS + 1)
            .map(|c| FreqTable::new(SYMBOL_MIN, c.to_vec()))
            .collect::<Result<_>>()?;
        Self::from_parts(edges.to_vec(), tables)
    }

    pub fn sha256_hex(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

/// Ideal code length in bits: `sum -log2 P(symbol)` under each symbol's table.
pub fn estimate_rate(symbols: &[i32], bins: &[usize], tables: &EntropyTables) -> Result<f64> {
    symbols
        .iter()
        .zip(bins)
        .map(|(&s, &b)| {
            let t = tables
                .tables()
                .get(b)
                .ok_or_else(|| Error::Bitstream(format!("no table {b}")))?;
            Ok(-t.probability(s)?.log2())
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tables() -> EntropyTables {
        EntropyTables::build().unwrap()
    }

    #[test]
    fn cdfs_are_valid_and_symmetric() {
        let t = tables();
        assert_eq!(t.tables().len(), NUM_BINS);
        for table in t.tables() {
            let cdf = table.cdf();
            assert_eq!(cdf[0], 0);
            assert_eq!(*cdf.last().unwrap(), PROB_TOTAL);
            assert!(cdf.windows(2).all(|w| w[1] > w[0]));
            for s in 0..=SYMBOL_MAX {
                let (_, fp) = table.interval(s).unwrap();
                let (_, fm) = table.interval(-s).unwrap();
                assert!(fp.abs_diff(fm) <= 1);
            }
        }
    }

    #[test]
    fn widest_bin_is_nearly_flat() {
        let t = tables();
        let wide = &t.tables()[NUM_BINS - 1];
        let p0 = wide.probability(0).unwrap();
        let p_edge = wide.probability(SYMBOL_MAX).unwrap();
        assert!(p0 / p_edge < 1e4 && p_edge > 0.0);
        assert!(gaussian_freqs(0.0).is_err());
        assert!(gaussian_freqs(f64::NAN).is_err());
    }

    /// Mass of `[s - 0.5, s + 0.5]` by composite Simpson on the density.
    fn simpson_mass(s: i32, sigma: f64) -> f64 {
        let n = 2000;
        let (lo, hi) = (s as f64 - 0.5, s as f64 + 0.5);
        let h = (hi - lo) / n as f64;
        let pdf = |x: f64| (-x * x / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
        let mut acc = pdf(lo) + pdf(hi);
        for i in 1..n {
            acc += pdf(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    }

    #[test]
    fn small_scale_mode_matches_quadrature() {
        let bin = 10;
        let sigma = bin_sigma(bin);
        assert!(sigma < 0.5);
        let masses: Vec<f64> = (SYMBOL_MIN..=SYMBOL_MAX).map(|s| simpson_mass(s, sigma)).collect();
        let z: f64 = masses.iter().sum();
        let budget = (PROB_TOTAL - NUM_SYMBOLS as u32) as f64;
        let others: u32 = (SYMBOL_MIN..=SYMBOL_MAX)
            .zip(&masses)
            .filter(|(s, _)| *s != 0)
            .map(|(_, m)| 1 + (m / z * budget).floor() as u32)
            .sum();
        let oracle_f0 = PROB_TOTAL - others;
        let (_, f0) = tables().tables()[bin].interval(0).unwrap();
        assert_eq!(f0, oracle_f0);
        assert!((f0 as f64 / PROB_TOTAL as f64 - masses[255] / z).abs() < 512.0 / PROB_TOTAL as f64);
    }

    #[test]
    fn estimate_rate_examples() {
        let mut freqs = vec![1u32; NUM_SYMBOLS];
        freqs[256] = PROB_TOTAL / 2;
        freqs[255] = PROB_TOTAL / 2 - (NUM_SYMBOLS as u32 - 2);
        let base = tables();
        let mut ts = base.tables().to_vec();
        ts[0] = FreqTable::from_freqs(SYMBOL_MIN, &freqs).unwrap();
        let et = EntropyTables::from_parts(base.edges().to_vec(), ts).unwrap();
        assert_eq!(estimate_rate(&[1], &[0], &et).unwrap(), 1.0);
        assert!(FreqTable::from_freqs(SYMBOL_MIN, &vec![0; NUM_SYMBOLS]).is_err());

        // the narrowest bin leaves only the 510 floor counts off zero
        let (_, f0) = base.tables()[0].interval(0).unwrap();
        assert_eq!(f0, PROB_TOTAL - 510);
        let bits = estimate_rate(&[0], &[0], &base).unwrap();
        assert!((bits - 0.011_275).abs() < 1e-5);

        let a = estimate_rate(&[0, 3], &[5, 9], &base).unwrap();
        let b = estimate_rate(&[0], &[5], &base).unwrap() + estimate_rate(&[3], &[9], &base).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn bins_by_integer_comparison() {
        let t = tables();
        assert_eq!(t.bin_fixed(0, 4), 0);
        assert_eq!(t.bin_fixed(-50, 4), 0);
        assert_eq!(t.bin_fixed(i32::MAX, 0), NUM_BINS - 1);
        for i in 0..NUM_BINS {
            let sigma = bin_sigma(i);
            assert_eq!(t.bin_float(sigma as f32), i);
            // fixed point with 8 fractional bits
            let v = (sigma * 256.0).round() as i32;
            let b = t.bin_fixed(v, 8);
            assert!(b.abs_diff(i) <= 1);
        }
    }

    #[test]
    fn bytes_round_trip() {
        let t = tables();
        let bytes = t.to_bytes();
        let back = EntropyTables::from_bytes(&bytes, NUM_BINS).unwrap();
        assert_eq!(back, t);
        assert!(EntropyTables::from_bytes(&bytes[4..], NUM_BINS).is_err());
    }
}
