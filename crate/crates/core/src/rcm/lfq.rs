//! Lookup-free sign quantization and its integer index view.

use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Sign code per token: `dims` entries in {-1, +1}.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LfqCode {
    signs: Vec<i8>,
    tokens: usize,
    dims: usize,
}

impl LfqCode {
    /// `q(z) = 2 * [z >= 0] - 1`, so zero maps to +1.
    pub fn quantize(z: &Tensor) -> Result<Self> {
        let (tokens, dims) = z.dims2()?;
        check_dims(dims)?;
        let signs = z.data().iter().map(|&v| if v >= 0.0 { 1 } else { -1 }).collect();
        Ok(Self { signs, tokens, dims })
    }

    pub fn from_signs(signs: Vec<i8>, dims: usize) -> Result<Self> {
        check_dims(dims)?;
        if signs.len() % dims != 0 || signs.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::InvalidArgument("signs must be whole rows of +-1".into()));
        }
        Ok(Self { tokens: signs.len() / dims, signs, dims })
    }

    pub fn from_indices(indices: &[u32], dims: usize) -> Result<Self> {
        check_dims(dims)?;
        let mut signs = Vec::with_capacity(indices.len() * dims);
        for &idx in indices {
            if dims < 32 && idx >> dims != 0 {
                return Err(Error::InvalidArgument(format!("index {idx} outside a {dims}-bit codebook")));
            }
            signs.extend((0..dims).map(|d| if idx >> d & 1 == 1 { 1 } else { -1 }));
        }
        Ok(Self { signs, tokens: indices.len(), dims })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn codebook_size(&self) -> u64 {
        1u64 << self.dims
    }

    pub fn signs(&self) -> &[i8] {
        &self.signs
    }

    /// Bit `d` of a token's index is set when dimension `d` is +1.
    pub fn indices(&self) -> Vec<u32> {
        self.signs
            .chunks(self.dims)
            .map(|row| row.iter().enumerate().fold(0u32, |acc, (d, &s)| acc | (u32::from(s > 0) << d)))
            .collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.signs.iter().map(|&s| f64::from(s)).collect();
        Tensor::new(vec![self.tokens, self.dims], data).expect("consistent code shape")
    }
}

fn check_dims(dims: usize) -> Result<()> {
    if dims == 0 || dims > 32 {
        return shape_err("lfq", format!("{dims} dimensions, expected 1..=32"));
    }
    Ok(())
}

/// Shannon entropy in bits of the empirical index distribution.
pub fn codebook_entropy(indices: &[u32]) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::InvalidArgument("codebook entropy of no codes".into()));
    }
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for &i in indices {
        *counts.entry(i).or_default() += 1;
    }
    let n = indices.len() as f64;
    let mut counts: Vec<usize> = counts.into_values().collect();
    counts.sort_unstable();
    Ok(counts.iter().map(|&c| c as f64 / n).map(|p| -p * p.log2()).sum::<f64>().max(0.0))
}
