//! Entropy coding: range coder, coding tables and the bitstream container.

mod bitstream;
mod cdf;
mod range;

pub use bitstream::{Header, MrtBitstream, HEADER_LEN, MAGIC, VERSION};
pub use cdf::{
    bernoulli_cdf, from_gaussian_symbol, gaussian_to_cdf, to_gaussian_symbol, FixedGaussian, GaussianSymbol,
    QuantizedCdf, ESCAPE_HIGH, ESCAPE_LOW, GAUSSIAN_SYMBOLS, MAX_CODED, PROB_BITS, PROB_TOTAL, SYMBOL_LIMIT,
};
pub use range::{decode_symbols, encode_symbols, RangeDecoder, RangeEncoder};
