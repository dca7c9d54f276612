//! Rate estimates: discretized Gaussian likelihood of the latents and a
//! factorized Bernoulli prior on the sign code.

use std::f64::consts::{LN_2, SQRT_2};

use crate::autodiff::{sigmoid, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Lower bound of every coded probability.
pub const PROB_FLOOR: f64 = 1.0 / 65536.0;
/// Lower bound of the predicted scale.
pub const SIGMA_MIN: f64 = 0.01;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Mass of `N(mu, sigma^2)` on `[y - 1/2, y + 1/2]`, before flooring. The
/// upper tail is used when the bin lies right of the mean to keep
/// precision far from it.
pub fn bin_probability(y: f64, mu: f64, sigma: f64) -> f64 {
    let lo = (y - mu - 0.5) / sigma;
    let hi = (y - mu + 0.5) / sigma;
    if lo > 0.0 {
        normal_cdf(-lo) - normal_cdf(-hi)
    } else {
        normal_cdf(hi) - normal_cdf(lo)
    }
}

/// Bits of one element: `-log2 max(p, floor)`.
pub fn gaussian_bits(y: f64, mu: f64, sigma: f64) -> f64 {
    -bin_probability(y, mu, sigma).max(PROB_FLOOR).log2()
}

/// Sum of [`gaussian_bits`] over all elements, on plain tensors.
pub fn rate_estimate(y_hat: &Tensor, mu: &Tensor, sigma: &Tensor) -> Result<f64> {
    if y_hat.shape() != mu.shape() || y_hat.shape() != sigma.shape() {
        return shape_err("rate_estimate", format!("{:?} {:?} {:?}", y_hat.shape(), mu.shape(), sigma.shape()));
    }
    Ok(y_hat.data().iter().zip(mu.data()).zip(sigma.data()).map(|((&y, &m), &s)| gaussian_bits(y, m, s)).sum())
}

/// Elementwise bits as a tape op, differentiable in all three inputs.
/// Floored elements have zero gradient.
pub fn gaussian_bits_var<'t>(y: &Var<'t>, mu: &Var<'t>, sigma: &Var<'t>) -> Result<Var<'t>> {
    let (yv, mv, sv) = (y.value(), mu.value(), sigma.value());
    if yv.shape() != mv.shape() || yv.shape() != sv.shape() {
        return shape_err("gaussian_bits", format!("{:?} {:?} {:?}", yv.shape(), mv.shape(), sv.shape()));
    }
    let n = yv.len();
    // d bits / d(y - mu) and d bits / d sigma per element.
    let mut d_y = vec![0.0; n];
    let mut d_s = vec![0.0; n];
    let mut bits = vec![0.0; n];
    for i in 0..n {
        let (yy, m, s) = (yv.data()[i], mv.data()[i], sv.data()[i]);
        let p = bin_probability(yy, m, s);
        if p > PROB_FLOOR {
            bits[i] = -p.log2();
            let lo = (yy - m - 0.5) / s;
            let hi = (yy - m + 0.5) / s;
            let (f_lo, f_hi) = (normal_pdf(lo), normal_pdf(hi));
            let dp_dy = (f_hi - f_lo) / s;
            let dp_ds = (lo * f_lo - hi * f_hi) / s;
            let k = -1.0 / (p * LN_2);
            d_y[i] = k * dp_dy;
            d_s[i] = k * dp_ds;
        } else {
            bits[i] = -PROB_FLOOR.log2();
        }
    }
    let out = Tensor::new(yv.shape().to_vec(), bits)?;
    y.tape().custom(
        "gaussian_bits",
        out,
        &[*y, *mu, *sigma],
        Box::new(move |g| {
            let gy: Vec<f64> = g.iter().zip(&d_y).map(|(g, d)| g * d).collect();
            let gm = gy.iter().map(|v| -v).collect();
            let gs = g.iter().zip(&d_s).map(|(g, d)| g * d).collect();
            vec![Some(gy), Some(gm), Some(gs)]
        }),
    )
}

/// Probability of a +1 sign under a logit, floored on both outcomes.
pub fn sign_probability(logit: f64, sign: f64) -> f64 {
    let p1 = sigmoid(logit);
    let p = if sign > 0.0 { p1 } else { 1.0 - p1 };
    p.max(PROB_FLOOR)
}

/// Total bits of `[tokens x dims]` signs under per-dimension logits.
pub fn hyper_rate_estimate(signs: &Tensor, logits: &Tensor) -> Result<f64> {
    let (_, dims) = signs.dims2()?;
    if logits.len() != dims {
        return shape_err("hyper_rate", format!("{} logits for {dims} dims", logits.len()));
    }
    Ok(signs
        .data()
        .iter()
        .enumerate()
        .map(|(i, &s)| -sign_probability(logits.data()[i % dims], s).log2())
        .sum())
}

/// [`hyper_rate_estimate`] as a tape op, differentiable in the logits
/// and (straight through the sign) in the code.
pub fn hyper_rate_var<'t>(signs: &Var<'t>, logits: &Var<'t>) -> Result<Var<'t>> {
    let (sv, lv) = (signs.value(), logits.value());
    let total = hyper_rate_estimate(&sv, &lv)?;
    let dims = lv.len();
    let mut d_logit = vec![0.0; dims];
    let mut d_sign = vec![0.0; sv.len()];
    for (i, &s) in sv.data().iter().enumerate() {
        let l = lv.data()[i % dims];
        let p1 = sigmoid(l);
        let p = if s > 0.0 { p1 } else { 1.0 - p1 };
        if p > PROB_FLOOR {
            // -log2 sigmoid(s * l) has derivative -s (1 - p) / ln 2 in l.
            let g = -s * (1.0 - p) / LN_2;
            d_logit[i % dims] += g;
            d_sign[i] = g * l / s;
        }
    }
    signs.tape().custom(
        "hyper_rate",
        Tensor::scalar(total),
        &[*signs, *logits],
        Box::new(move |g| {
            vec![
                Some(d_sign.iter().map(|d| g[0] * d).collect()),
                Some(d_logit.iter().map(|d| g[0] * d).collect()),
            ]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::{check_gradients, GradCheck};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Composite Simpson integration of the density over the bin, an
    /// evaluation independent of erfc.
    fn simpson_mass(y: f64, mu: f64, sigma: f64) -> f64 {
        let (a, b) = (y - 0.5, y + 0.5);
        let n = 20_000;
        let h = (b - a) / n as f64;
        let f = |x: f64| normal_pdf((x - mu) / sigma) / sigma;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    #[test]
    fn matches_quadrature_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 64;
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-4i32..=4) as f64).collect();
        let mu: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(0.3..3.0)).collect();
        let t = |v: Vec<f64>| Tensor::new(vec![n], v).unwrap();
        let got = rate_estimate(&t(y.clone()), &t(mu.clone()), &t(sigma.clone())).unwrap();
        let oracle: f64 = (0..n).map(|i| -simpson_mass(y[i], mu[i], sigma[i]).max(PROB_FLOOR).log2()).sum();
        assert!((got - oracle).abs() <= 1e-3 * oracle, "{got} vs {oracle}");
    }

    #[test]
    fn concentrated_mass_costs_nothing() {
        assert!(gaussian_bits(2.0, 2.0, SIGMA_MIN) < 1e-9);
        assert_eq!(gaussian_bits(50.0, 0.0, 0.1), 16.0);
    }

    #[test]
    fn monotone_in_sigma_at_the_mean() {
        let mut prev = -1.0;
        for i in 0..200 {
            let s = SIGMA_MIN + i as f64 * 0.05;
            let b = gaussian_bits(1.0, 1.0, s);
            assert!(b >= prev);
            prev = b;
        }
    }

    #[test]
    fn fair_coin_is_one_bit_per_dimension() {
        let signs = Tensor::new(vec![3, 14], (0..42).map(|i| if i % 3 == 0 { 1.0 } else { -1.0 }).collect()).unwrap();
        assert_eq!(hyper_rate_estimate(&signs, &Tensor::zeros(&[14])).unwrap(), 42.0);
    }

    #[test]
    fn gradients() {
        let y = Tensor::new(vec![6], vec![0.0, 1.0, -2.0, 3.0, 0.2, -0.7]).unwrap();
        let mu = Tensor::new(vec![6], vec![0.1, 0.5, -1.0, 0.0, 0.0, -0.4]).unwrap();
        let sigma = Tensor::new(vec![6], vec![0.8, 1.5, 0.6, 2.0, 0.3, 1.1]).unwrap();
        let r = check_gradients(&[y, mu, sigma], GradCheck::default(), |v| gaussian_bits_var(&v[0], &v[1], &v[2])?.sum())
            .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
        let logits = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let signs = Tensor::new(vec![2, 3], vec![1.0, -1.0, 1.0, -1.0, -1.0, 1.0]).unwrap();
        let r = check_gradients(&[logits], GradCheck::default(), |v| {
            hyper_rate_var(&v[0].tape().constant(signs.clone()), &v[0])
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }

    #[test]
    fn sign_gradient_is_straight_through() {
        // With the sign replaced by identity, d/ds of -log2 sigmoid(s * l)
        // at s = +-1 is -(1 - p) l / ln 2.
        let tape = Tape::new();
        let s = tape.param(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
        let l = tape.constant(Tensor::new(vec![2], vec![0.4, 0.9]).unwrap());
        let g = tape.backward(&hyper_rate_var(&s, &l).unwrap()).unwrap().tensor(&s);
        for (i, (&sign, &logit)) in [1.0f64, -1.0].iter().zip(&[0.4f64, 0.9]).enumerate() {
            let p = sigmoid(sign * logit);
            assert!((g.data()[i] + (1.0 - p) * logit / LN_2).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn rate_is_non_negative(y in -20i32..20, mu in -20.0f64..20.0, sigma in SIGMA_MIN..50.0) {
            let b = gaussian_bits(y as f64, mu, sigma);
            prop_assert!((0.0..=16.0).contains(&b));
        }
    }
}
