//! Spatial-channel context model over the 1-D latent sequence.
//!
//! Channels split into two groups and positions into even and odd, giving
//! four slices decoded in a fixed order:
//!
//! | stage | slice          | conditioned on            |
//! |-------|----------------|---------------------------|
//! | 0     | group 0, even  | hyper context             |
//! | 1     | group 0, odd   | + stage 0                 |
//! | 2     | group 1, even  | + stages 0 and 1          |
//! | 3     | group 1, odd   | + stages 0, 1 and 2       |
//!
//! Every stage sees the latents with not-yet-decoded entries zeroed, so the
//! encoder and decoder compute identical parameters.

use std::rc::Rc;

use crate::autodiff::Var;
use crate::birwkv::{BiRwkvBlock, HIDDEN_RATIO};
use crate::error::{shape_err, Error, Result};
use crate::nn::Linear;
use crate::params::{Binding, ParamBuilder};
use crate::rcm::rate::SIGMA_MIN;
use crate::tensor::Tensor;

pub const STAGES: usize = 4;

/// Stage index of the slice holding element `(token, channel)`.
pub fn slice_of(token: usize, channel: usize, group0_width: usize) -> usize {
    2 * usize::from(channel >= group0_width) + token % 2
}

#[derive(Clone, Debug)]
struct Stage {
    input: Linear,
    block: BiRwkvBlock,
    output: Linear,
}

#[derive(Clone, Debug)]
pub struct Scctx {
    stages: Vec<Stage>,
    c_y: usize,
    group0: usize,
}

/// Per-element Gaussian parameters for every latent element.
#[derive(Clone, Copy, Debug)]
pub struct EntropyParams<'t> {
    pub mu: Var<'t>,
    pub sigma: Var<'t>,
}

impl Scctx {
    pub fn new(b: &mut ParamBuilder, name: &str, c_y: usize, ctx_dim: usize) -> Self {
        let group0 = c_y / 2;
        let stages = (0..STAGES)
            .map(|s| {
                let width = if s < 2 { group0 } else { c_y - group0 };
                Stage {
                    // Hyper context, masked latents and the position parity.
                    input: Linear::new(b, &format!("{name}.stage{s}.input"), 2 * c_y + 1, ctx_dim),
                    block: BiRwkvBlock::new(b, &format!("{name}.stage{s}.block"), ctx_dim, HIDDEN_RATIO),
                    output: Linear::new(b, &format!("{name}.stage{s}.output"), ctx_dim, 2 * width),
                }
            })
            .collect();
        Self { stages, c_y, group0 }
    }

    pub fn group0_width(&self) -> usize {
        self.group0
    }

    /// Channel range of the group a stage decodes.
    pub fn stage_channels(&self, stage: usize) -> std::ops::Range<usize> {
        if stage < 2 {
            0..self.group0
        } else {
            self.group0..self.c_y
        }
    }

    /// Keeps elements of slices decoded before `stage` and writes an exact
    /// `+0.0` everywhere else, so unknown slices cannot leak even through the
    /// sign of zero.
    fn mask_unknown<'t>(&self, y: &Var<'t>, stage: usize) -> Result<Var<'t>> {
        let tokens = y.shape()[0];
        let c = self.c_y;
        let padded = Var::concat_cols(&[*y, y.tape().constant(Tensor::zeros(&[tokens, 1]))])?;
        let mut idx = Vec::with_capacity(tokens * c);
        for t in 0..tokens {
            for ch in 0..c {
                let col = if slice_of(t, ch, self.group0) < stage { ch } else { c };
                idx.push(t * (c + 1) + col);
            }
        }
        padded.gather(Rc::new(idx), &[tokens, c])
    }

    /// `(mu, sigma)` for the channels of `stage`'s group at every position;
    /// only the positions of the stage's parity are meaningful. `y_known`
    /// may hold anything in slices not yet decoded. Fails when a slice the
    /// stage depends on is not marked available.
    pub fn stage_params<'t>(
        &self,
        bind: &Binding<'t, '_>,
        hyper_ctx: &Var<'t>,
        y_known: &Var<'t>,
        available: &[bool; STAGES],
        stage: usize,
    ) -> Result<(Var<'t>, Var<'t>)> {
        if stage >= STAGES {
            return Err(Error::Schedule(format!("no stage {stage}")));
        }
        if let Some(missing) = (0..stage).find(|&s| !available[s]) {
            return Err(Error::Schedule(format!("stage {stage} needs slice {missing}, which is not decoded yet")));
        }
        let shape = y_known.shape();
        if shape.len() != 2 || shape[1] != self.c_y || hyper_ctx.shape() != shape {
            return shape_err("scctx", format!("latents {shape:?}, context {:?}", hyper_ctx.shape()));
        }
        let tokens = shape[0];
        let tape = bind.tape();
        let masked = self.mask_unknown(y_known, stage)?;
        let parity = Tensor::new(vec![tokens, 1], (0..tokens).map(|t| (t % 2) as f64).collect())?;
        let input = Var::concat_cols(&[*hyper_ctx, masked, tape.constant(parity)])?;
        let st = &self.stages[stage];
        let h = st.block.forward(bind, &st.input.forward(bind, &input)?)?;
        let out = st.output.forward(bind, &h)?;
        let width = self.stage_channels(stage).len();
        let mu = out.slice_cols(0, width)?;
        let sigma = out.slice_cols(width, 2 * width)?.softplus()?.add_scalar(SIGMA_MIN)?;
        Ok((mu, sigma))
    }

    /// Parameters for every element given the full quantized latents, as
    /// the decoder would see them stage by stage.
    pub fn entropy_params<'t>(&self, bind: &Binding<'t, '_>, hyper_ctx: &Var<'t>, y_hat: &Var<'t>) -> Result<EntropyParams<'t>> {
        let tokens = y_hat.shape()[0];
        let all = [true; STAGES];
        let mut mus = Vec::with_capacity(STAGES);
        let mut sigmas = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let (m, sg) = self.stage_params(bind, hyper_ctx, y_hat, &all, s)?;
            mus.push(m);
            sigmas.push(sg);
        }
        let mu = self.interleave(tokens, &mus)?;
        let sigma = self.interleave(tokens, &sigmas)?;
        Ok(EntropyParams { mu, sigma })
    }

    /// Picks each element from the stage that owns its slice.
    fn interleave<'t>(&self, tokens: usize, per_stage: &[Var<'t>]) -> Result<Var<'t>> {
        let stacked = Var::concat_cols(per_stage)?;
        let total = stacked.shape()[1];
        let offsets: Vec<usize> = (0..STAGES).map(|s| (0..s).map(|p| self.stage_channels(p).len()).sum()).collect();
        let mut idx = Vec::with_capacity(tokens * self.c_y);
        for t in 0..tokens {
            for ch in 0..self.c_y {
                let s = slice_of(t, ch, self.group0);
                let local = ch - self.stage_channels(s).start;
                idx.push(t * total + offsets[s] + local);
            }
        }
        stacked.gather(Rc::new(idx), &[tokens, self.c_y])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::params::Trainable;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Scctx, crate::params::ParamStore) {
        let mut b = ParamBuilder::new(21);
        let s = Scctx::new(&mut b, "ctx", 6, 8);
        let mut store = b.finish();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).ends_with(".weight") {
                *store.get_mut(id) = Tensor::randn(store.get(id).shape(), 0.4, &mut rng);
            }
        }
        (s, store)
    }

    fn params(s: &Scctx, store: &crate::params::ParamStore, ctx: &Tensor, y: &Tensor) -> (Tensor, Tensor) {
        let tape = Tape::new();
        let bind = Binding::new(&tape, store, Trainable::Nothing);
        let p = s.entropy_params(&bind, &tape.constant(ctx.clone()), &tape.constant(y.clone())).unwrap();
        ((*p.mu.value()).clone(), (*p.sigma.value()).clone())
    }

    #[test]
    fn schedule_violation_is_an_error() {
        let (s, store) = setup();
        let tape = Tape::new();
        let bind = Binding::new(&tape, &store, Trainable::Nothing);
        let z = tape.constant(Tensor::zeros(&[10, 6]));
        let avail = [true, false, false, false];
        assert!(s.stage_params(&bind, &z, &z, &avail, 1).is_ok());
        assert!(matches!(s.stage_params(&bind, &z, &z, &avail, 2), Err(Error::Schedule(_))));
        assert!(matches!(s.stage_params(&bind, &z, &z, &[false; 4], 1), Err(Error::Schedule(_))));
        assert!(s.stage_params(&bind, &z, &z, &[false; 4], 0).is_ok());
    }

    #[test]
    fn causality_over_the_schedule() {
        let (s, store) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (t, c) = (11, 6);
        let ctx = Tensor::rand_uniform(&[t, c], -1.0, 1.0, &mut rng);
        let y = Tensor::rand_uniform(&[t, c], -3.0, 3.0, &mut rng).map(f64::round);
        let (mu, sigma) = params(&s, &store, &ctx, &y);
        assert!(sigma.data().iter().all(|&v| v >= SIGMA_MIN));
        for stage in 0..STAGES {
            let mut y2 = y.clone();
            for tok in 0..t {
                for ch in 0..c {
                    if slice_of(tok, ch, s.group0_width()) == stage {
                        y2.data_mut()[tok * c + ch] += 7.0;
                    }
                }
            }
            let (mu2, sigma2) = params(&s, &store, &ctx, &y2);
            let mut later_changed = false;
            for tok in 0..t {
                for ch in 0..c {
                    let i = tok * c + ch;
                    let owner = slice_of(tok, ch, s.group0_width());
                    if owner <= stage {
                        assert_eq!((mu.data()[i], sigma.data()[i]), (mu2.data()[i], sigma2.data()[i]));
                    } else if mu.data()[i] != mu2.data()[i] {
                        later_changed = true;
                    }
                }
            }
            assert_eq!(later_changed, stage < STAGES - 1, "stage {stage}");
        }
    }

    #[test]
    fn first_slice_uses_only_hyper_context() {
        let (s, store) = setup();
        let ctx = Tensor::rand_uniform(&[8, 6], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(6));
        let a = params(&s, &store, &ctx, &Tensor::zeros(&[8, 6]));
        let b = params(&s, &store, &ctx, &Tensor::full(&[8, 6], 4.0));
        for tok in (0..8).step_by(2) {
            for ch in 0..s.group0_width() {
                assert_eq!(a.0.data()[tok * 6 + ch], b.0.data()[tok * 6 + ch]);
            }
        }
    }
}
