//! Synthetic training images and the toy block tokenizer that stands in for
//! a pretrained discrete image tokenizer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::dims;
use crate::tensor::Tensor;

/// Nearest-centroid coder over fixed random `block x block` RGB centroids.
#[derive(Clone, Debug)]
pub struct BlockTokenizer {
    pub block: usize,
    centroids: Vec<Vec<f64>>,
}

impl BlockTokenizer {
    pub fn new(codebook: usize, block: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = 3 * block * block;
        // Each centroid is a flat color plus mild texture, so nearest
        // centroid search tracks block color rather than noise.
        let centroids = (0..codebook)
            .map(|_| {
                let base: [f64; 3] = [rng.random(), rng.random(), rng.random()];
                (0..len).map(|i| (base[i / (block * block)] + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0)).collect()
            })
            .collect();
        Self { block, centroids }
    }

    pub fn codebook_size(&self) -> usize {
        self.centroids.len()
    }

    /// Row-major code grid of `(H / block) x (W / block)`.
    pub fn codes(&self, image: &Tensor) -> Result<(usize, usize, Vec<usize>)> {
        let (h, w) = dims(image)?;
        let b = self.block;
        if h % b != 0 || w % b != 0 {
            return Err(Error::Dimensions { width: w, height: h, multiple: b });
        }
        let (rows, cols) = (h / b, w / b);
        let mut codes = Vec::with_capacity(rows * cols);
        let mut patch = vec![0.0; 3 * b * b];
        for by in 0..rows {
            for bx in 0..cols {
                for ch in 0..3 {
                    for y in 0..b {
                        let src = ch * h * w + (by * b + y) * w + bx * b;
                        patch[(ch * b + y) * b..(ch * b + y + 1) * b].copy_from_slice(&image.data()[src..src + b]);
                    }
                }
                let mut best = (f64::INFINITY, 0);
                for (k, c) in self.centroids.iter().enumerate() {
                    let d: f64 = c.iter().zip(&patch).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best.0 {
                        best = (d, k);
                    }
                }
                codes.push(best.1);
            }
        }
        Ok((rows, cols, codes))
    }
}

/// Smooth color fields with a few hard-edged shapes, values in `[0, 1]`.
pub fn synthetic_image(height: usize, width: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0.0; 3 * height * width];
    let waves: Vec<[f64; 4]> = (0..3 * 3)
        .map(|_| {
            [
                rng.random_range(0.5..4.0) * std::f64::consts::TAU / width as f64,
                rng.random_range(0.5..4.0) * std::f64::consts::TAU / height as f64,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.05..0.2),
            ]
        })
        .collect();
    let base: [f64; 3] = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
    for ch in 0..3 {
        for y in 0..height {
            for x in 0..width {
                let v = waves[ch * 3..ch * 3 + 3]
                    .iter()
                    .map(|&[fx, fy, ph, amp]| amp * (fx * x as f64 + fy * y as f64 + ph).sin())
                    .sum::<f64>();
                data[(ch * height + y) * width + x] = base[ch] + v;
            }
        }
    }
    for _ in 0..rng.random_range(2..6) {
        let (x0, y0) = (rng.random_range(0..width), rng.random_range(0..height));
        let (rw, rh) = (rng.random_range(width / 16..width / 3 + 1), rng.random_range(height / 16..height / 3 + 1));
        let color: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        for ch in 0..3 {
            for y in y0..(y0 + rh).min(height) {
                for x in x0..(x0 + rw).min(width) {
                    data[(ch * height + y) * width + x] = color[ch];
                }
            }
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Tensor::new(vec![3, height, width], data).expect("consistent shape")
}

/// `count` images from consecutive seeds.
pub fn synthetic_corpus(count: usize, height: usize, width: usize, seed: u64) -> Vec<Tensor> {
    (0..count as u64).map(|i| synthetic_image(height, width, seed.wrapping_add(i))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_gives_constant_grid() {
        let tok = BlockTokenizer::new(64, 8, 1);
        let (rows, cols, codes) = tok.codes(&Tensor::full(&[3, 32, 48], 0.3)).unwrap();
        assert_eq!((rows, cols), (4, 6));
        assert!(codes.iter().all(|&c| c == codes[0]));
    }

    #[test]
    fn grid_shape_and_errors() {
        let tok = BlockTokenizer::new(64, 8, 1);
        let (rows, cols, codes) = tok.codes(&synthetic_image(256, 512, 3)).unwrap();
        assert_eq!((rows, cols, codes.len()), (32, 64, 2048));
        assert!(codes.iter().all(|&c| c < 64));
        assert!(tok.codes(&Tensor::zeros(&[3, 12, 16])).is_err());
    }

    #[test]
    fn stable_for_a_seed() {
        let img = synthetic_image(64, 64, 9);
        assert_eq!(img, synthetic_image(64, 64, 9));
        let a = BlockTokenizer::new(64, 8, 5).codes(&img).unwrap();
        assert_eq!(a, BlockTokenizer::new(64, 8, 5).codes(&img).unwrap());
    }

    #[test]
    fn corpus_images_have_distinct_codes() {
        let tok = BlockTokenizer::new(64, 8, 0);
        let grids: Vec<_> = synthetic_corpus(8, 256, 256, 100).iter().map(|im| tok.codes(im).unwrap().2).collect();
        for i in 0..grids.len() {
            for j in i + 1..grids.len() {
                assert_ne!(grids[i], grids[j], "images {i} and {j} collide");
            }
            let distinct: std::collections::BTreeSet<_> = grids[i].iter().collect();
            assert!(distinct.len() > 1);
        }
    }
}
