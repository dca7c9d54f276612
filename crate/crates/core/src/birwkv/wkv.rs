//! Bidirectional weighted key-value attention kernels.
//!
//! For a sequence of length `T` and per-channel decay `w >= 0` and bonus
//! `u`, token `t` aggregates
//!
//! ```text
//!         sum_{i != t} exp(-(|t-i|-1)/T * w + k_i) v_i + exp(u + k_t) v_t
//! wkv_t = ----------------------------------------------------------------
//!         sum_{i != t} exp(-(|t-i|-1)/T * w + k_i)     + exp(u + k_t)
//! ```
//!
//! All buffers are row-major `[T x c]`; `w` and `u` have length `c`.

use crate::error::{Error, Result};

/// Scan output plus what the backward pass needs.
#[derive(Clone, Debug)]
pub struct WkvForward {
    pub out: Vec<f64>,
    /// `ln` of the denominator per element.
    pub log_den: Vec<f64>,
    /// `d wkv / d w` per element.
    pub dout_dw: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct WkvGrads {
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
    pub u: Vec<f64>,
}

fn check_dims(k: &[f64], v: &[f64], w: &[f64], u: &[f64], t: usize, c: usize) -> Result<()> {
    if t == 0 {
        return Err(Error::InvalidArgument("wkv needs at least one token".into()));
    }
    if k.len() != t * c || v.len() != t * c || w.len() != c || u.len() != c {
        return Err(Error::Shape {
            op: "bi_wkv",
            detail: format!("k {} v {} w {} u {} for T={t} c={c}", k.len(), v.len(), w.len(), u.len()),
        });
    }
    Ok(())
}

fn finite(out: &[f64]) -> Result<()> {
    if out.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op: "bi_wkv" })
    }
}

/// Direct O(T^2 c) evaluation with per-token max subtraction.
pub fn bi_wkv_naive(k: &[f64], v: &[f64], w: &[f64], u: &[f64], t: usize, c: usize) -> Result<Vec<f64>> {
    check_dims(k, v, w, u, t, c)?;
    let tf = t as f64;
    let mut out = vec![0.0; t * c];
    let mut expo = vec![0.0; t];
    for d in 0..c {
        for tt in 0..t {
            for i in 0..t {
                expo[i] = if i == tt {
                    u[d] + k[i * c + d]
                } else {
                    -((tt.abs_diff(i) - 1) as f64) / tf * w[d] + k[i * c + d]
                };
            }
            let max = expo.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..t {
                let e = (expo[i] - max).exp();
                num += e * v[i * c + d];
                den += e;
            }
            out[tt * c + d] = num / den;
        }
    }
    finite(&out)?;
    Ok(out)
}

/// Running sums of one scan direction, true value = stored * exp(scale).
#[derive(Clone, Copy)]
struct Acc {
    scale: f64,
    num: f64,
    den: f64,
    /// Distance-weighted sums for the decay gradient.
    num_d: f64,
    den_d: f64,
}

impl Acc {
    const EMPTY: Acc = Acc { scale: f64::NEG_INFINITY, num: 0.0, den: 0.0, num_d: 0.0, den_d: 0.0 };

    /// Moves one token further away (decay by `exp(-w/T)`), then admits a
    /// new adjacent term `exp(key) * value`.
    fn push(&mut self, log_decay: f64, key: f64, value: f64) {
        self.num_d += self.num;
        self.den_d += self.den;
        let decayed = self.scale + log_decay;
        let scale = decayed.max(key);
        let keep = if decayed == f64::NEG_INFINITY { 0.0 } else { (decayed - scale).exp() };
        let add = (key - scale).exp();
        self.num = self.num * keep + value * add;
        self.den = self.den * keep + add;
        self.num_d *= keep;
        self.den_d *= keep;
        self.scale = scale;
    }

    fn weight(&self, reference: f64) -> f64 {
        if self.scale == f64::NEG_INFINITY {
            0.0
        } else {
            (self.scale - reference).exp()
        }
    }
}

/// O(T c) evaluation as a forward and a backward prefix scan.
pub fn bi_wkv_scan(k: &[f64], v: &[f64], w: &[f64], u: &[f64], t: usize, c: usize) -> Result<WkvForward> {
    check_dims(k, v, w, u, t, c)?;
    let tf = t as f64;
    let mut out = vec![0.0; t * c];
    let mut log_den = vec![0.0; t * c];
    let mut dout_dw = vec![0.0; t * c];
    let mut fwd = vec![Acc::EMPTY; t];
    for d in 0..c {
        let log_decay = -w[d] / tf;
        let mut acc = Acc::EMPTY;
        for tt in 0..t {
            fwd[tt] = acc;
            acc.push(log_decay, k[tt * c + d], v[tt * c + d]);
        }
        let mut bwd = Acc::EMPTY;
        for tt in (0..t).rev() {
            let f = fwd[tt];
            let self_key = u[d] + k[tt * c + d];
            let reference = f.scale.max(bwd.scale).max(self_key);
            let (sf, sb, ss) = (f.weight(reference), bwd.weight(reference), (self_key - reference).exp());
            let vt = v[tt * c + d];
            let num = f.num * sf + bwd.num * sb + vt * ss;
            let den = f.den * sf + bwd.den * sb + ss;
            let y = num / den;
            let idx = tt * c + d;
            out[idx] = y;
            log_den[idx] = reference + den.ln();
            let num_d = f.num_d * sf + bwd.num_d * sb;
            let den_d = f.den_d * sf + bwd.den_d * sb;
            dout_dw[idx] = -(num_d - y * den_d) / (den * tf);
            bwd.push(log_decay, k[idx], vt);
        }
    }
    finite(&out)?;
    Ok(WkvForward { out, log_den, dout_dw })
}

/// Gradient scan state: sums of `g * e^{-logD}` and `g * wkv * e^{-logD}`
/// at a shared scale.
#[derive(Clone, Copy)]
struct GradAcc {
    scale: f64,
    g: f64,
    gy: f64,
}

impl GradAcc {
    const EMPTY: GradAcc = GradAcc { scale: f64::NEG_INFINITY, g: 0.0, gy: 0.0 };

    fn push(&mut self, log_decay: f64, log_scale: f64, g: f64, gy: f64) {
        let decayed = self.scale + log_decay;
        let scale = decayed.max(log_scale);
        let keep = if decayed == f64::NEG_INFINITY { 0.0 } else { (decayed - scale).exp() };
        let add = (log_scale - scale).exp();
        self.g = self.g * keep + g * add;
        self.gy = self.gy * keep + gy * add;
        self.scale = scale;
    }

    /// `(sum g, sum g*wkv)` multiplied by `exp(key)`.
    fn times_exp(&self, key: f64) -> (f64, f64) {
        if self.scale == f64::NEG_INFINITY {
            return (0.0, 0.0);
        }
        let f = (self.scale + key).exp();
        (self.g * f, self.gy * f)
    }
}

/// Gradients of `sum(grad_out * wkv)` with respect to `k`, `v`, `w`, `u`,
/// in O(T c).
pub fn bi_wkv_backward(
    k: &[f64],
    v: &[f64],
    w: &[f64],
    u: &[f64],
    fwd: &WkvForward,
    grad_out: &[f64],
    t: usize,
    c: usize,
) -> WkvGrads {
    let tf = t as f64;
    let mut gk = vec![0.0; t * c];
    let mut gv = vec![0.0; t * c];
    let mut gw = vec![0.0; c];
    let mut gu = vec![0.0; c];
    let mut ahead = vec![GradAcc::EMPTY; t];
    for d in 0..c {
        let log_decay = -w[d] / tf;
        // Contributions from tokens after i.
        let mut acc = GradAcc::EMPTY;
        for i in (0..t).rev() {
            ahead[i] = acc;
            let idx = i * c + d;
            let g = grad_out[idx];
            acc.push(log_decay, -fwd.log_den[idx], g, g * fwd.out[idx]);
        }
        let mut behind = GradAcc::EMPTY;
        for i in 0..t {
            let idx = i * c + d;
            let (g, y, vi, ki) = (grad_out[idx], fwd.out[idx], v[idx], k[idx]);
            let p_self = (u[d] + ki - fwd.log_den[idx]).exp();
            let (ag, agy) = ahead[i].times_exp(ki);
            let (bg, bgy) = behind.times_exp(ki);
            let dv = ag + bg + g * p_self;
            gv[idx] = dv;
            gk[idx] = vi * dv - (agy + bgy + g * y * p_self);
            gu[d] += g * p_self * (vi - y);
            gw[d] += g * fwd.dout_dw[idx];
            behind.push(log_decay, -fwd.log_den[idx], g, g * y);
        }
    }
    WkvGrads { k: gk, v: gv, w: gw, u: gu }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Straight transcription of the defining sum, no stabilization.
    fn direct(k: &[f64], v: &[f64], w: &[f64], u: &[f64], t: usize, c: usize) -> Vec<f64> {
        let mut out = vec![0.0; t * c];
        for d in 0..c {
            for tt in 0..t {
                let (mut num, mut den) = (0.0, 0.0);
                for i in 0..t {
                    let e = if i == tt {
                        (u[d] + k[i * c + d]).exp()
                    } else {
                        (-((tt as f64 - i as f64).abs() - 1.0) / t as f64 * w[d] + k[i * c + d]).exp()
                    };
                    num += e * v[i * c + d];
                    den += e;
                }
                out[tt * c + d] = num / den;
            }
        }
        out
    }

    fn random_case(rng: &mut ChaCha8Rng, t: usize, c: usize, spread: f64) -> [Vec<f64>; 4] {
        let k = (0..t * c).map(|_| rng.random_range(-spread..spread)).collect();
        let v = (0..t * c).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w = (0..c).map(|_| rng.random_range(0.0..8.0)).collect();
        let u = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();
        [k, v, w, u]
    }

    #[test]
    fn single_token_returns_value() {
        let out = bi_wkv_scan(&[0.3, -1.0], &[2.0, 2.0], &[1.0, 5.0], &[0.1, 0.2], 1, 2).unwrap();
        assert_eq!(out.out, vec![2.0, 2.0]);
        let naive = bi_wkv_naive(&[0.3, -1.0], &[2.0, 2.0], &[1.0, 5.0], &[0.1, 0.2], 1, 2).unwrap();
        assert_eq!(naive, vec![2.0, 2.0]);
    }

    #[test]
    fn equal_exponents_average() {
        let k = [0.0, 0.0, 0.0];
        let v = [1.0, 2.0, 3.0];
        for out in [bi_wkv_naive(&k, &v, &[0.0], &[0.0], 3, 1).unwrap(), bi_wkv_scan(&k, &v, &[0.0], &[0.0], 3, 1).unwrap().out] {
            for y in out {
                assert!((y - 2.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn naive_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let [k, v, w, u] = random_case(&mut rng, 4, 2, 2.0);
        let a = bi_wkv_naive(&k, &v, &w, &u, 4, 2).unwrap();
        let b = direct(&k, &v, &w, &u, 4, 2);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-13 * y.abs().max(1.0));
        }
    }

    #[test]
    fn scan_matches_naive_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let t = rng.random_range(1..=64);
            let c = rng.random_range(1..=8);
            let [k, v, w, u] = random_case(&mut rng, t, c, 3.0);
            let naive = bi_wkv_naive(&k, &v, &w, &u, t, c).unwrap();
            let scan = bi_wkv_scan(&k, &v, &w, &u, t, c).unwrap();
            for (a, b) in scan.out.iter().zip(&naive) {
                assert!((a - b).abs() / (b.abs() + 1e-9) < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn scan_survives_large_keys() {
        let k = [800.0, -800.0, 700.0, 0.0];
        let v = [1.0, -1.0, 0.5, 2.0];
        let naive = bi_wkv_naive(&k, &v, &[3.0], &[1.0], 4, 1).unwrap();
        let scan = bi_wkv_scan(&k, &v, &[3.0], &[1.0], 4, 1).unwrap();
        for (a, b) in scan.out.iter().zip(&naive) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn output_is_convex_combination() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let [k, v, w, u] = random_case(&mut rng, 40, 3, 4.0);
        let out = bi_wkv_scan(&k, &v, &w, &u, 40, 3).unwrap().out;
        for d in 0..3 {
            let col: Vec<f64> = (0..40).map(|i| v[i * 3 + d]).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..40 {
                assert!(out[i * 3 + d] >= lo - 1e-12 && out[i * 3 + d] <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let (t, c) = (5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let [k, v, w, u] = random_case(&mut rng, t, c, 2.0);
        let g: Vec<f64> = (0..t * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = |k: &[f64], v: &[f64], w: &[f64], u: &[f64]| -> f64 {
            direct(k, v, w, u, t, c).iter().zip(&g).map(|(a, b)| a * b).sum()
        };
        let fwd = bi_wkv_scan(&k, &v, &w, &u, t, c).unwrap();
        let grads = bi_wkv_backward(&k, &v, &w, &u, &fwd, &g, t, c);
        let h = 1e-5;
        let mut inputs = [k, v, w, u];
        let analytic = [grads.k, grads.v, grads.w, grads.u];
        for which in 0..4 {
            for j in 0..inputs[which].len() {
                let orig = inputs[which][j];
                inputs[which][j] = orig + h;
                let p = loss(&inputs[0], &inputs[1], &inputs[2], &inputs[3]);
                inputs[which][j] = orig - h;
                let m = loss(&inputs[0], &inputs[1], &inputs[2], &inputs[3]);
                inputs[which][j] = orig;
                let num = (p - m) / (2.0 * h);
                let a = analytic[which][j];
                assert!((a - num).abs() / a.abs().max(num.abs()).max(1e-3) < 1e-4, "input {which}[{j}]: {a} vs {num}");
            }
        }
    }

    #[test]
    fn single_token_gradients() {
        let fwd = bi_wkv_scan(&[0.5], &[3.0], &[2.0], &[0.7], 1, 1).unwrap();
        let grads = bi_wkv_backward(&[0.5], &[3.0], &[2.0], &[0.7], &fwd, &[1.5], 1, 1);
        assert!((grads.v[0] - 1.5).abs() < 1e-15);
        assert_eq!(grads.w[0], 0.0);
        assert!(grads.k[0].abs() < 1e-15);
        assert!(grads.u[0].abs() < 1e-15);
    }

    #[test]
    fn rejects_empty_and_mismatched() {
        assert!(bi_wkv_scan(&[], &[], &[1.0], &[0.0], 0, 1).is_err());
        assert!(bi_wkv_naive(&[0.0; 3], &[0.0; 2], &[1.0], &[0.0], 3, 1).is_err());
    }
}
