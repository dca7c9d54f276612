//! Compression model on the latent tokens: analysis and synthesis
//! transforms, scalar quantization, the sign-quantized hyper branch and the
//! context entropy model.

mod lfq;
mod rate;
mod scctx;

pub use lfq::{codebook_entropy, LfqCode};
pub use rate::{
    bin_probability, gaussian_bits, gaussian_bits_var, hyper_rate_estimate, hyper_rate_var, normal_cdf,
    rate_estimate, sign_probability, PROB_FLOOR, SIGMA_MIN,
};
pub use scctx::{slice_of, EntropyParams, Scctx, STAGES};

use rand::Rng;

use crate::autodiff::Var;
use crate::birwkv::{BiRwkvBlock, HIDDEN_RATIO};
use crate::error::Result;
use crate::nn::Mlp;
use crate::params::{Binding, ParamBuilder, ParamId};
use crate::tensor::Tensor;
use crate::transform::ModelConfig;

/// Inference quantizer: round half away from zero. Negative zero is
/// normalized to `+0.0` so decoded and encoded values match bitwise.
pub fn quantize_round(y: &Tensor) -> Tensor {
    y.map(|v| v.round() + 0.0)
}

/// Training quantizer for the reconstruction path: rounding forward,
/// identity backward.
pub fn quantize_ste<'t>(y: &Var<'t>) -> Result<Var<'t>> {
    y.ste_round()
}

/// Training proxy for the rate term: `y + U(-1/2, 1/2)`.
pub fn quantize_noise<'t>(y: &Var<'t>, rng: &mut impl Rng) -> Result<Var<'t>> {
    let noise = Tensor::rand_uniform(&y.shape(), -0.5, 0.5, rng);
    y.add(&y.tape().constant(noise))
}

#[derive(Clone, Debug)]
pub struct Rcm {
    pub up: Mlp,
    pub analysis: Vec<BiRwkvBlock>,
    pub synthesis: Vec<BiRwkvBlock>,
    pub down: Mlp,
    pub hyper: Vec<BiRwkvBlock>,
    pub hyper_down: Mlp,
    pub hyper_up: Mlp,
    pub hyper_logits: ParamId,
    pub scctx: Scctx,
    pub c_y: usize,
    pub c_z: usize,
}

impl Rcm {
    pub fn new(b: &mut ParamBuilder, name: &str, cfg: &ModelConfig) -> Self {
        let blocks = |b: &mut ParamBuilder, part: &str, n: usize| -> Vec<BiRwkvBlock> {
            (0..n).map(|i| BiRwkvBlock::new(b, &format!("{name}.{part}{i}"), cfg.c_y, HIDDEN_RATIO)).collect()
        };
        Self {
            up: Mlp::new(b, &format!("{name}.up"), cfg.dim, cfg.c_y),
            analysis: blocks(b, "analysis", cfg.rcm_blocks),
            synthesis: blocks(b, "synthesis", cfg.rcm_blocks),
            down: Mlp::new(b, &format!("{name}.down"), cfg.c_y, cfg.dim),
            hyper: blocks(b, "hyper", cfg.hyper_blocks),
            hyper_down: Mlp::new(b, &format!("{name}.hyper_down"), cfg.c_y, cfg.c_z),
            hyper_up: Mlp::new(b, &format!("{name}.hyper_up"), cfg.c_z, cfg.c_y),
            hyper_logits: b.zeros(format!("{name}.hyper_logits"), &[cfg.c_z]),
            scctx: Scctx::new(b, &format!("{name}.scctx"), cfg.c_y, cfg.ctx_dim),
            c_y: cfg.c_y,
            c_z: cfg.c_z,
        }
    }

    /// `[(N*32) x c]` latent tokens to `y`, `[(N*32) x c_y]`.
    pub fn analysis<'t>(&self, bind: &Binding<'t, '_>, latents: &Var<'t>) -> Result<Var<'t>> {
        let mut y = self.up.forward(bind, latents)?;
        for blk in &self.analysis {
            y = blk.forward(bind, &y)?;
        }
        Ok(y)
    }

    /// Quantized `y` back to token width.
    pub fn synthesis<'t>(&self, bind: &Binding<'t, '_>, y_hat: &Var<'t>) -> Result<Var<'t>> {
        let mut h = *y_hat;
        for blk in &self.synthesis {
            h = blk.forward(bind, &h)?;
        }
        self.down.forward(bind, &h)
    }

    pub fn hyper_analysis<'t>(&self, bind: &Binding<'t, '_>, y: &Var<'t>) -> Result<Var<'t>> {
        let mut h = *y;
        for blk in &self.hyper {
            h = blk.forward(bind, &h)?;
        }
        self.hyper_down.forward(bind, &h)
    }

    /// Sign code (as +-1 values) to the per-token context of the entropy
    /// model.
    pub fn hyper_synthesis<'t>(&self, bind: &Binding<'t, '_>, z_hat: &Var<'t>) -> Result<Var<'t>> {
        self.hyper_up.forward(bind, z_hat)
    }

    pub fn entropy_params<'t>(&self, bind: &Binding<'t, '_>, hyper_ctx: &Var<'t>, y_hat: &Var<'t>) -> Result<EntropyParams<'t>> {
        self.scctx.entropy_params(bind, hyper_ctx, y_hat)
    }

    pub fn output_params(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.analysis.iter().chain(&self.synthesis).chain(&self.hyper).flat_map(BiRwkvBlock::output_params).collect();
        v.sort();
        v
    }
}

/// Differentiable rate pieces of one forward pass through the model.
#[derive(Clone, Copy, Debug)]
pub struct RcmForward<'t> {
    pub y: Var<'t>,
    pub y_hat: Var<'t>,
    pub z: Var<'t>,
    pub z_hat: Var<'t>,
    pub latents_hat: Var<'t>,
    /// Bits of the latents under the context model.
    pub latent_bits: Var<'t>,
    /// Bits of the sign code under the factorized prior.
    pub hyper_bits: Var<'t>,
}

impl Rcm {
    /// Training pass: the rate of `y` is measured on the noisy proxy, while
    /// the reconstruction and the context use straight-through rounding.
    pub fn forward_train<'t>(&self, bind: &Binding<'t, '_>, latents: &Var<'t>, rng: &mut impl Rng) -> Result<RcmForward<'t>> {
        let y = self.analysis(bind, latents)?;
        let y_hat = quantize_ste(&y)?;
        let y_noisy = quantize_noise(&y, rng)?;
        let z = self.hyper_analysis(bind, &y)?;
        let z_hat = z.ste_sign()?;
        let ctx = self.hyper_synthesis(bind, &z_hat)?;
        let params = self.entropy_params(bind, &ctx, &y_hat)?;
        let latent_bits = gaussian_bits_var(&y_noisy, &params.mu, &params.sigma)?.sum()?;
        let hyper_bits = hyper_rate_var(&z_hat, &bind.p(self.hyper_logits))?;
        let latents_hat = self.synthesis(bind, &y_hat)?;
        Ok(RcmForward { y, y_hat, z, z_hat, latents_hat, latent_bits, hyper_bits })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::gradcheck::{check_model_gradients, GradCheck};
    use crate::params::{ParamStore, Trainable};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig { dim: 6, c_y: 4, c_z: 3, ctx_dim: 4, ..ModelConfig::tiny() }
    }

    fn setup(std: f64) -> (Rcm, ParamStore) {
        let mut b = ParamBuilder::new(8);
        let rcm = Rcm::new(&mut b, "rcm", &cfg());
        let mut store = b.finish();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).ends_with(".weight") {
                *store.get_mut(id) = Tensor::randn(store.get(id).shape(), std, &mut rng);
            }
        }
        (rcm, store)
    }

    #[test]
    fn rounding_convention() {
        let y = Tensor::new(vec![6], vec![0.4, -0.5, 2.5, 3.0, -2.0, -0.49]).unwrap();
        assert_eq!(quantize_round(&y).data(), &[0.0, -1.0, 3.0, 3.0, -2.0, 0.0]);
        assert!(quantize_round(&y).data()[5].is_sign_positive());
    }

    #[test]
    fn shapes_and_zero_residual_analysis() {
        let (rcm, mut store) = setup(0.5);
        let x = Tensor::rand_uniform(&[32, 6], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let run = |store: &ParamStore| {
            let tape = Tape::new();
            let bind = Binding::new(&tape, store, Trainable::Nothing);
            let l = tape.constant(x.clone());
            let y = rcm.analysis(&bind, &l).unwrap();
            assert_eq!(y.shape(), vec![32, 4]);
            assert_eq!(rcm.hyper_analysis(&bind, &y).unwrap().shape(), vec![32, 3]);
            assert_eq!(rcm.synthesis(&bind, &y).unwrap().shape(), vec![32, 6]);
            let up = rcm.up.forward(&bind, &l).unwrap();
            ((*y.value()).clone(), (*up.value()).clone())
        };
        let (y, up) = run(&store);
        assert!(y.max_abs_diff(&up) > 0.0);
        for id in rcm.output_params() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
        let (y, up) = run(&store);
        assert_eq!(y, up);
    }

    #[test]
    fn hyper_synthesis_with_zero_weights_is_bias() {
        let (rcm, mut store) = setup(0.5);
        for id in [rcm.hyper_up.fc1.weight, rcm.hyper_up.fc2.weight] {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&shape);
        }
        *store.get_mut(rcm.hyper_up.fc2.bias.unwrap()) = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let tape = Tape::new();
        let bind = Binding::new(&tape, &store, Trainable::Nothing);
        let z = tape.constant(Tensor::full(&[5, 3], -1.0));
        let ctx = rcm.hyper_synthesis(&bind, &z).unwrap();
        assert_eq!(ctx.shape(), vec![5, 4]);
        for r in 0..5 {
            assert_eq!(ctx.value().row(r), &[1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn training_pass_is_finite_and_non_negative() {
        let (rcm, store) = setup(0.5);
        let tape = Tape::new();
        let bind = Binding::new(&tape, &store, Trainable::All);
        let x = tape.constant(Tensor::rand_uniform(&[64, 6], -2.0, 2.0, &mut ChaCha8Rng::seed_from_u64(2)));
        let f = rcm.forward_train(&bind, &x, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(f.latent_bits.item() >= 0.0);
        assert!(f.hyper_bits.item() >= 0.0);
        assert!(f.z_hat.value().data().iter().all(|&v| v == 1.0 || v == -1.0));
        let loss = f.latent_bits.add(&f.hyper_bits).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert!(bind.param_grads(&grads).iter().all(|(_, g)| g.is_finite()));
    }

    #[test]
    fn component_gradients() {
        let (rcm, store) = setup(0.5);
        let x = Tensor::rand_uniform(&[8, 6], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let probe = Tensor::rand_uniform(&[8, 6], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let z = Tensor::new(vec![8, 3], (0..24).map(|i| if i % 5 < 2 { 1.0 } else { -1.0 }).collect()).unwrap();
        let cfg = GradCheck { max_per_input: 40, ..Default::default() };
        let r = check_model_gradients(&store, &[x.clone(), z.clone()], cfg, |bind, v| {
            let y = rcm.analysis(bind, &v[0])?;
            let h = rcm.hyper_analysis(bind, &y)?.square()?.sum()?;
            let ctx = rcm.hyper_synthesis(bind, &v[1])?;
            let params = rcm.entropy_params(bind, &ctx, &y)?;
            let bits = gaussian_bits_var(&y.scale(3.0)?, &params.mu, &params.sigma)?.sum()?;
            let back = rcm.synthesis(bind, &y)?.mul(&bind.constant(probe.clone()))?.sum()?;
            bits.add(&h)?.add(&back)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}
