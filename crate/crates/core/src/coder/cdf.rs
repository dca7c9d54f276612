//! Integer coding tables and the discretized Gaussian model.

use crate::error::{Error, Result};
use crate::rcm::{bin_probability, normal_cdf, SIGMA_MIN};

pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;

/// Largest magnitude coded directly; values beyond use an escape.
pub const SYMBOL_LIMIT: i32 = 64;
/// Escape below `-SYMBOL_LIMIT`, `2 * SYMBOL_LIMIT + 1` values, escape above.
pub const GAUSSIAN_SYMBOLS: usize = 2 * SYMBOL_LIMIT as usize + 3;
pub const ESCAPE_LOW: usize = 0;
pub const ESCAPE_HIGH: usize = GAUSSIAN_SYMBOLS - 1;
/// Largest magnitude an escape can carry.
pub const MAX_CODED: i32 = SYMBOL_LIMIT + 1 + u16::MAX as i32;

/// Fractional bits of the fixed-point mean and scale.
pub const FIXED_FRAC_BITS: u32 = 8;

/// Cumulative table over `symbols()` entries: starts at 0, ends at
/// `2^16`, strictly increasing.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedCdf {
    cdf: Vec<u32>,
}

impl QuantizedCdf {
    pub fn new(cdf: Vec<u32>) -> Result<Self> {
        if cdf.len() < 2 || cdf[0] != 0 || *cdf.last().expect("nonempty") != PROB_TOTAL {
            return Err(Error::InvalidArgument("cdf must run from 0 to 2^16".into()));
        }
        if cdf.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("cdf must be strictly increasing".into()));
        }
        Ok(Self { cdf })
    }

    /// Integer frequencies proportional to `weights`, each at least 1. The
    /// rounding remainder is handed out one count at a time in order of
    /// decreasing weight (lower index first on ties), so mirrored weights
    /// give tables symmetric to within one count.
    pub fn from_probabilities(weights: &[f64]) -> Result<Self> {
        let n = weights.len();
        if n < 2 || n > PROB_TOTAL as usize / 2 {
            return Err(Error::InvalidArgument(format!("{n} symbols")));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) || weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidArgument("weights must be non-negative with a positive sum".into()));
        }
        let spare = f64::from(PROB_TOTAL - n as u32);
        let mut freq: Vec<u32> = weights.iter().map(|&w| 1 + (w / total * spare).floor() as u32).collect();
        let used: u32 = freq.iter().sum();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]));
        for &i in order.iter().cycle().take((PROB_TOTAL - used) as usize) {
            freq[i] += 1;
        }
        let mut cdf = Vec::with_capacity(n + 1);
        cdf.push(0);
        let mut acc = 0;
        for f in freq {
            acc += f;
            cdf.push(acc);
        }
        Self::new(cdf)
    }

    pub fn symbols(&self) -> usize {
        self.cdf.len() - 1
    }

    pub fn table(&self) -> &[u32] {
        &self.cdf
    }

    /// `(start, frequency)` of a symbol.
    pub fn interval(&self, symbol: usize) -> Result<(u32, u32)> {
        if symbol >= self.symbols() {
            return Err(Error::InvalidArgument(format!("symbol {symbol} outside a {}-symbol table", self.symbols())));
        }
        Ok((self.cdf[symbol], self.cdf[symbol + 1] - self.cdf[symbol]))
    }

    /// The symbol whose interval holds `v < 2^16`.
    pub fn symbol_at(&self, v: u32) -> usize {
        self.cdf.partition_point(|&c| c <= v) - 1
    }

    /// Ideal code length of a symbol in bits.
    pub fn bits(&self, symbol: usize) -> f64 {
        let f = self.cdf[symbol + 1] - self.cdf[symbol];
        f64::from(PROB_BITS) - f64::from(f).log2()
    }
}

/// Mean and scale rounded to 8 fractional bits. Encoder and decoder build
/// tables from these values only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FixedGaussian {
    pub mu: i16,
    pub sigma: u16,
}

impl FixedGaussian {
    pub fn quantize(mu: f64, sigma: f64) -> Self {
        let scale = f64::from(1u32 << FIXED_FRAC_BITS);
        let min_sigma = (SIGMA_MIN * scale).ceil();
        Self {
            mu: (mu * scale).round().clamp(f64::from(i16::MIN), f64::from(i16::MAX)) as i16,
            sigma: (sigma * scale).round().clamp(min_sigma, f64::from(u16::MAX)) as u16,
        }
    }

    pub fn mu(&self) -> f64 {
        f64::from(self.mu) / f64::from(1u32 << FIXED_FRAC_BITS)
    }

    pub fn sigma(&self) -> f64 {
        f64::from(self.sigma) / f64::from(1u32 << FIXED_FRAC_BITS)
    }
}

/// Discretized Gaussian over `[-64, 64]` with one escape per tail.
pub fn gaussian_to_cdf(g: FixedGaussian) -> QuantizedCdf {
    let (mu, sigma) = (g.mu(), g.sigma());
    let mut p = Vec::with_capacity(GAUSSIAN_SYMBOLS);
    p.push(normal_cdf((-(SYMBOL_LIMIT as f64) - 0.5 - mu) / sigma));
    p.extend((-SYMBOL_LIMIT..=SYMBOL_LIMIT).map(|s| bin_probability(f64::from(s), mu, sigma)));
    p.push(normal_cdf(-((SYMBOL_LIMIT as f64) + 0.5 - mu) / sigma));
    // All-zero only if mu sits far outside the support in f64 terms; a
    // flat table is still valid then.
    if p.iter().sum::<f64>() <= 0.0 {
        p.iter_mut().for_each(|v| *v = 1.0);
    }
    QuantizedCdf::from_probabilities(&p).expect("gaussian weights are valid")
}

/// How an integer value is coded against a Gaussian table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GaussianSymbol {
    Direct(usize),
    /// Escape symbol followed by 16 raw bits.
    Escape(usize, u16),
}

pub fn to_gaussian_symbol(value: i32) -> Result<GaussianSymbol> {
    if value.abs() > MAX_CODED {
        return Err(Error::InvalidArgument(format!("latent value {value} exceeds the codable range +-{MAX_CODED}")));
    }
    Ok(if value < -SYMBOL_LIMIT {
        GaussianSymbol::Escape(ESCAPE_LOW, (-SYMBOL_LIMIT - 1 - value) as u16)
    } else if value > SYMBOL_LIMIT {
        GaussianSymbol::Escape(ESCAPE_HIGH, (value - SYMBOL_LIMIT - 1) as u16)
    } else {
        GaussianSymbol::Direct((value + SYMBOL_LIMIT + 1) as usize)
    })
}

pub fn from_gaussian_symbol(symbol: usize, raw: u16) -> i32 {
    match symbol {
        ESCAPE_LOW => -SYMBOL_LIMIT - 1 - i32::from(raw),
        ESCAPE_HIGH => SYMBOL_LIMIT + 1 + i32::from(raw),
        s => s as i32 - SYMBOL_LIMIT - 1,
    }
}

/// Two-symbol table for one sign: symbol 1 is `+1` with probability
/// `sigmoid(logit)`, kept inside `[1, 2^16 - 1]` counts.
pub fn bernoulli_cdf(logit: f64) -> QuantizedCdf {
    let p1 = crate::autodiff::sigmoid(logit);
    let f1 = (p1 * f64::from(PROB_TOTAL)).round().clamp(1.0, f64::from(PROB_TOTAL - 1)) as u32;
    QuantizedCdf::new(vec![0, PROB_TOTAL - f1, PROB_TOTAL]).expect("two nonempty intervals")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn wide_gaussian_is_near_uniform() {
        // The largest fixed-point scale is 256, so the density still falls by
        // about 3% across the support.
        let cdf = gaussian_to_cdf(FixedGaussian::quantize(0.0, 4000.0));
        let freqs: Vec<u32> = cdf.table().windows(2).map(|w| w[1] - w[0]).collect();
        let inner = &freqs[1..GAUSSIAN_SYMBOLS - 1];
        let (lo, hi) = (*inner.iter().min().unwrap(), *inner.iter().max().unwrap());
        assert!(f64::from(hi) / f64::from(lo) < 1.05, "{lo}..{hi}");
    }

    #[test]
    fn strictly_increasing_for_random_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let g = FixedGaussian::quantize(rng.random_range(-100.0..100.0), rng.random_range(0.0..80.0));
            let cdf = gaussian_to_cdf(g);
            assert_eq!(cdf.symbols(), GAUSSIAN_SYMBOLS);
            assert!(cdf.table().windows(2).all(|w| w[1] > w[0]));
            assert_eq!(*cdf.table().last().unwrap(), PROB_TOTAL);
        }
    }

    #[test]
    fn centered_table_is_symmetric() {
        for sigma in [0.01, 0.3, 1.0, 2.5, 17.0, 90.0] {
            let cdf = gaussian_to_cdf(FixedGaussian::quantize(0.0, sigma));
            let t = cdf.table();
            let n = cdf.symbols();
            for s in 0..=n {
                // Lower edge of symbol s mirrors the upper edge of n-1-s.
                let mirrored = t[n - s];
                assert!((i64::from(t[s]) + i64::from(mirrored) - i64::from(PROB_TOTAL)).abs() <= 1, "sigma {sigma} s {s}");
            }
        }
    }

    #[test]
    fn fixed_point_clamps() {
        let g = FixedGaussian::quantize(1000.0, 0.0);
        assert_eq!(g.mu, i16::MAX);
        assert!(g.sigma() >= SIGMA_MIN);
        assert_eq!(FixedGaussian::quantize(-0.5, 1.0), FixedGaussian { mu: -128, sigma: 256 });
    }

    #[test]
    fn escape_mapping() {
        for v in [-MAX_CODED, -200, -65, -64, 0, 64, 65, 300, MAX_CODED] {
            let (s, raw) = match to_gaussian_symbol(v).unwrap() {
                GaussianSymbol::Direct(s) => (s, 0),
                GaussianSymbol::Escape(s, r) => (s, r),
            };
            assert_eq!(from_gaussian_symbol(s, raw), v);
        }
        assert!(matches!(to_gaussian_symbol(65), Ok(GaussianSymbol::Escape(ESCAPE_HIGH, 0))));
        assert!(to_gaussian_symbol(MAX_CODED + 1).is_err());
    }

    #[test]
    fn bernoulli_tables() {
        let t = bernoulli_cdf(0.0);
        assert_eq!(t.table(), &[0, 32768, 65536]);
        assert_eq!(t.bits(1), 1.0);
        assert_eq!(bernoulli_cdf(100.0).table(), &[0, 1, 65536]);
    }

    #[test]
    fn rejects_invalid_tables() {
        assert!(QuantizedCdf::new(vec![0, 10, 10, PROB_TOTAL]).is_err());
        assert!(QuantizedCdf::new(vec![1, PROB_TOTAL]).is_err());
        assert!(QuantizedCdf::from_probabilities(&[1.0]).is_err());
        assert!(QuantizedCdf::from_probabilities(&[0.0, 0.0]).is_err());
    }

    proptest! {
        #[test]
        fn every_symbol_has_mass(weights in proptest::collection::vec(0.0f64..1.0, 2..300)) {
            prop_assume!(weights.iter().sum::<f64>() > 0.0);
            let cdf = QuantizedCdf::from_probabilities(&weights).unwrap();
            for s in 0..cdf.symbols() {
                let (_, f) = cdf.interval(s).unwrap();
                prop_assert!(f >= 1);
                prop_assert_eq!(cdf.symbol_at(cdf.table()[s]), s);
            }
        }
    }
}
